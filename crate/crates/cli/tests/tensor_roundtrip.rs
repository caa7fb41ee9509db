use fbev_cli::tensor_io::{read_tensor, write_tensor, Tensor, TensorData};
use proptest::prelude::*;

fn data(dtype: u8, n: usize) -> BoxedStrategy<TensorData> {
    match dtype {
        0 => prop::collection::vec(any::<f32>(), n).prop_map(TensorData::F32).boxed(),
        1 => prop::collection::vec(any::<f64>(), n).prop_map(TensorData::F64).boxed(),
        2 => prop::collection::vec(any::<u8>(), n).prop_map(TensorData::U8).boxed(),
        3 => prop::collection::vec(any::<u16>(), n).prop_map(TensorData::U16).boxed(),
        _ => prop::collection::vec(any::<i32>(), n).prop_map(TensorData::I32).boxed(),
    }
}

fn tensor() -> impl Strategy<Value = Tensor> {
    (0u8..5, prop::collection::vec(0usize..5, 0..5)).prop_flat_map(|(dtype, dims)| {
        let n = dims.iter().product();
        data(dtype, n).prop_map(move |d| Tensor::new(dims.clone(), d).unwrap())
    })
}

/// Bitwise equality, so NaN payloads count as equal to themselves.
fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.dims == b.dims
        && match (&a.data, &b.data) {
            (TensorData::F32(x), TensorData::F32(y)) => x.iter().map(|v| v.to_bits()).eq(y.iter().map(|v| v.to_bits())),
            (TensorData::F64(x), TensorData::F64(y)) => x.iter().map(|v| v.to_bits()).eq(y.iter().map(|v| v.to_bits())),
            (x, y) => x == y,
        }
}

proptest! {
    #[test]
    fn encode_decode_is_identity(t in tensor()) {
        let back = Tensor::decode(&t.encode()).unwrap();
        prop_assert!(same_bits(&t, &back));
    }

    #[test]
    fn truncation_is_rejected(t in tensor(), cut in 1usize..16) {
        let bytes = t.encode();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(Tensor::decode(&bytes[..keep]).is_err());
    }
}

#[test]
fn file_round_trip_every_dtype() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        TensorData::F32(vec![1.5, -0.0]),
        TensorData::F64(vec![f64::MIN_POSITIVE, 3.0]),
        TensorData::U8(vec![0, 255]),
        TensorData::U16(vec![1, 65535]),
        TensorData::I32(vec![i32::MIN, 7]),
    ];
    for (i, d) in cases.into_iter().enumerate() {
        let t = Tensor::new(vec![1, 2], d).unwrap();
        let p = tmp.path().join(format!("{i}.fbvt"));
        write_tensor(&p, &t).unwrap();
        assert!(same_bits(&t, &read_tensor(&p).unwrap()));
    }
}
