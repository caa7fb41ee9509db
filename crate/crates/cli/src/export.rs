//! Binary PGM and PPM renders of BEV grids.
//!
//! Images show the grid from above with the vehicle's forward axis pointing
//! up and its left to the left: image row `r` is grid row `nx - 1 - r` and
//! image column `c` is grid column `ny - 1 - c`.

use fbev_core::metrics::SemanticClass;
use ndarray::ArrayView2;

/// Class colors, indexed by class id.
pub const PALETTE: [[u8; 3]; 5] = [
    [0, 0, 0],       // invalid: black
    [0, 0, 255],     // vehicles: blue
    [255, 0, 0],     // markings: red
    [255, 165, 0],   // street: orange
    [128, 0, 128],   // background: purple
];

pub fn class_color(id: u8) -> [u8; 3] {
    match SemanticClass::from_id(id) {
        Some(c) => PALETTE[c as usize],
        None => [255, 255, 255],
    }
}

fn top_down<T: Copy>(grid: ArrayView2<'_, T>) -> impl Iterator<Item = T> + '_ {
    let (nx, ny) = grid.dim();
    (0..nx).rev().flat_map(move |i| (0..ny).rev().map(move |j| grid[(i, j)]))
}

/// Class map as a color PPM.
pub fn ppm_classes(classes: ArrayView2<'_, u8>) -> Vec<u8> {
    let (nx, ny) = classes.dim();
    let mut out = format!("P6\n{ny} {nx}\n255\n").into_bytes();
    for id in top_down(classes) {
        out.extend_from_slice(&class_color(id));
    }
    out
}

/// Values in `[0, 1]` as an 8-bit gray PGM; out-of-range values saturate.
pub fn pgm_unit(values: ArrayView2<'_, f64>) -> Vec<u8> {
    let (nx, ny) = values.dim();
    let mut out = format!("P5\n{ny} {nx}\n255\n").into_bytes();
    out.extend(top_down(values).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn ppm_orientation_and_palette() {
        // Grid row 1 (further forward) must appear on the first image row.
        let g = arr2(&[[3u8, 4], [1, 2]]);
        let img = ppm_classes(g.view());
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        let px: Vec<[u8; 3]> = img[header.len()..].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        assert_eq!(px, vec![PALETTE[2], PALETTE[1], PALETTE[4], PALETTE[3]]);
    }

    #[test]
    fn pgm_scaling() {
        let img = pgm_unit(arr2(&[[0.0, 1.0, 2.0]]).view());
        assert_eq!(&img[img.len() - 3..], &[255, 255, 0]);
    }
}
