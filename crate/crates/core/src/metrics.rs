//! Intersection over union, visibility filtering and the five-score mean.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 5;

/// Cells at least this visible enter the semantic scores.
pub const VISIBLE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum SemanticClass {
    Invalid = 0,
    Vehicle = 1,
    Marking = 2,
    Street = 3,
    Background = 4,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; NUM_CLASSES] = [
        SemanticClass::Invalid,
        SemanticClass::Vehicle,
        SemanticClass::Marking,
        SemanticClass::Street,
        SemanticClass::Background,
    ];

    /// Classes scored in the mean; the invalid class is not.
    pub const SCORED: [SemanticClass; 4] = [
        SemanticClass::Vehicle,
        SemanticClass::Marking,
        SemanticClass::Street,
        SemanticClass::Background,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticClass::Invalid => "invalid",
            SemanticClass::Vehicle => "vehicles",
            SemanticClass::Marking => "markings",
            SemanticClass::Street => "street",
            SemanticClass::Background => "background",
        }
    }
}

impl fmt::Display for SemanticClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `|pred ∧ gt| / |pred ∨ gt|`, and 1 when both masks are empty.
pub fn iou(pred: ArrayView2<'_, bool>, gt: ArrayView2<'_, bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!("masks {:?} and {:?}", pred.dim(), gt.dim())));
    }
    let mut counts = Counts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        counts.add(p, g);
    }
    Ok(counts.iou())
}

pub fn visibility_filter(visibility: ArrayView2<'_, f64>) -> Array2<bool> {
    visibility.mapv(|v| v >= VISIBLE_THRESHOLD)
}

/// Mean of the occlusion score and the four class scores.
pub fn miou(occlusion: f64, vehicles: f64, markings: f64, street: f64, background: f64) -> f64 {
    (occlusion + vehicles + markings + street + background) / 5.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counts {
    intersection: u64,
    union: u64,
}

impl Counts {
    fn add(&mut self, p: bool, g: bool) {
        self.intersection += u64::from(p && g);
        self.union += u64::from(p || g);
    }

    fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_per_class: BTreeMap<SemanticClass, f64>,
    pub iou_occlusion: f64,
    pub miou: f64,
    /// Fraction of cells passing the visibility filter.
    pub visible_cell_fraction: f64,
}

impl EvalReport {
    pub fn class(&self, c: SemanticClass) -> f64 {
        self.iou_per_class.get(&c).copied().unwrap_or(f64::NAN)
    }

    /// `key=value` lines in a fixed order.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for c in SemanticClass::SCORED {
            out.push_str(&format!("iou.{}={:.6}\n", c.name(), self.class(c)));
        }
        out.push_str(&format!("iou.occlusion={:.6}\n", self.iou_occlusion));
        out.push_str(&format!("miou={:.6}\n", self.miou));
        out.push_str(&format!("visible_cell_fraction={:.6}\n", self.visible_cell_fraction));
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>7}", "class", "IoU")?;
        writeln!(f, "{:<12} {:>7.3}", "occlusion", self.iou_occlusion)?;
        for c in SemanticClass::SCORED {
            writeln!(f, "{:<12} {:>7.3}", c.name(), self.class(c))?;
        }
        writeln!(f, "{:<12} {:>7.3}", "mIoU", self.miou)?;
        write!(f, "{:<12} {:>7.3}", "visible", self.visible_cell_fraction)
    }
}

/// Sums intersections and unions over frames and divides once at the end.
#[derive(Debug, Clone, Default)]
pub struct IouAccumulator {
    classes: [Counts; NUM_CLASSES],
    occlusion: Counts,
    visible: u64,
    cells: u64,
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one frame. Occlusion maps are probabilities, binarized as
    /// occluded where `p > 0.5`; ground-truth visibility is `1 - gt_occ`.
    pub fn add(
        &mut self,
        pred_class: ArrayView2<'_, u8>,
        pred_occ: ArrayView2<'_, f64>,
        gt_class: ArrayView2<'_, u8>,
        gt_occ: ArrayView2<'_, f64>,
    ) -> Result<()> {
        let dim = gt_class.dim();
        if pred_class.dim() != dim || pred_occ.dim() != dim || gt_occ.dim() != dim {
            return Err(Error::shape(format!(
                "pred {:?}/{:?} vs gt {:?}/{:?}",
                pred_class.dim(),
                pred_occ.dim(),
                dim,
                gt_occ.dim()
            )));
        }
        let mut frame = self.clone();
        for (((&pc, &po), &gc), &go) in pred_class.iter().zip(pred_occ.iter()).zip(gt_class.iter()).zip(gt_occ.iter())
        {
            for id in [pc, gc] {
                if SemanticClass::from_id(id).is_none() {
                    return Err(Error::Data(format!("unknown class id {id}")));
                }
            }
            if !(0.0..=1.0).contains(&po) || !(0.0..=1.0).contains(&go) {
                return Err(Error::Data(format!("occlusion value outside [0, 1]: {po} / {go}")));
            }
            frame.cells += 1;
            frame.occlusion.add(po > VISIBLE_THRESHOLD, go > VISIBLE_THRESHOLD);
            if 1.0 - go < VISIBLE_THRESHOLD {
                continue;
            }
            frame.visible += 1;
            for c in SemanticClass::ALL {
                frame.classes[c as usize].add(pc == c.id(), gc == c.id());
            }
        }
        *self = frame;
        Ok(())
    }

    pub fn report(&self) -> EvalReport {
        let iou_per_class: BTreeMap<_, _> = SemanticClass::SCORED
            .into_iter()
            .map(|c| (c, self.classes[c as usize].iou()))
            .collect();
        let occ = self.occlusion.iou();
        EvalReport {
            miou: miou(
                occ,
                iou_per_class[&SemanticClass::Vehicle],
                iou_per_class[&SemanticClass::Marking],
                iou_per_class[&SemanticClass::Street],
                iou_per_class[&SemanticClass::Background],
            ),
            iou_per_class,
            iou_occlusion: occ,
            visible_cell_fraction: if self.cells == 0 {
                0.0
            } else {
                self.visible as f64 / self.cells as f64
            },
        }
    }
}

pub fn evaluate(
    pred_class: ArrayView2<'_, u8>,
    pred_occ: ArrayView2<'_, f64>,
    gt_class: ArrayView2<'_, u8>,
    gt_occ: ArrayView2<'_, f64>,
) -> Result<EvalReport> {
    let mut acc = IouAccumulator::new();
    acc.add(pred_class, pred_occ, gt_class, gt_occ)?;
    Ok(acc.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn iou_examples() {
        let a = arr2(&[[true, true], [false, false]]);
        let b = arr2(&[[false, false], [true, true]]);
        assert_eq!(iou(a.view(), a.view()).unwrap(), 1.0);
        assert_eq!(iou(a.view(), b.view()).unwrap(), 0.0);
        let half = arr2(&[[true, false], [false, false]]);
        assert_eq!(iou(half.view(), a.view()).unwrap(), 0.5);
        let empty = Array2::from_elem((2, 2), false);
        assert_eq!(iou(empty.view(), empty.view()).unwrap(), 1.0);
        assert!(iou(a.view(), Array2::from_elem((1, 2), false).view()).is_err());
    }

    #[test]
    fn filter_boundary() {
        let v = arr2(&[[0.5, 0.49, 1.0]]);
        assert_eq!(visibility_filter(v.view()), arr2(&[[true, false, true]]));
    }

    #[test]
    fn perfect_prediction() {
        let cls = arr2(&[[1u8, 2, 3], [4, 3, 0]]);
        let occ = arr2(&[[0.0, 0.0, 1.0], [0.0, 0.2, 1.0]]);
        let r = evaluate(cls.view(), occ.view(), cls.view(), occ.view()).unwrap();
        assert!(r.iou_per_class.values().all(|&v| v == 1.0));
        assert_eq!(r.iou_occlusion, 1.0);
        assert_eq!(r.miou, 1.0);
        assert!((r.visible_cell_fraction - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn hidden_cells_do_not_score() {
        let gt = arr2(&[[3u8, 3]]);
        let pred = arr2(&[[3u8, 1]]);
        let occ = arr2(&[[0.0, 0.9]]);
        let r = evaluate(pred.view(), occ.view(), gt.view(), occ.view()).unwrap();
        assert_eq!(r.class(SemanticClass::Street), 1.0);
        assert_eq!(r.class(SemanticClass::Vehicle), 1.0);
    }

    #[test]
    fn unknown_class_is_rejected() {
        let gt = arr2(&[[9u8]]);
        let occ = arr2(&[[0.0]]);
        assert!(matches!(evaluate(gt.view(), occ.view(), gt.view(), occ.view()), Err(Error::Data(_))));
    }

    #[test]
    fn accumulation_divides_once() {
        let gt = arr2(&[[1u8, 3]]);
        let a = arr2(&[[1u8, 1]]);
        let b = arr2(&[[1u8, 3]]);
        let occ = arr2(&[[0.0, 0.0]]);
        let mut acc = IouAccumulator::new();
        acc.add(a.view(), occ.view(), gt.view(), occ.view()).unwrap();
        acc.add(b.view(), occ.view(), gt.view(), occ.view()).unwrap();
        // Vehicles: intersection 2, union 3 over both frames.
        assert!((acc.report().class(SemanticClass::Vehicle) - 2.0 / 3.0).abs() < 1e-15);
    }
}
