use bbq_core::tensorio::{emit_csv, payload_offset, read_tensor, write_tensor, Tensor, TensorFile};
use bbq_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_tensor_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("z.bbqt");
    write_tensor(&Tensor::zeros(vec![2, 2]).unwrap(), &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(bytes.len(), 4 + 4 + 1 + 4 + 16 + 16);
    assert_eq!(&bytes[..4], b"BBQT");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(bytes[8], 0);
    assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 2);
    assert!(bytes[payload_offset(2)..].iter().all(|&b| b == 0));
}

#[test]
fn payload_is_little_endian_ieee_single() {
    let t = Tensor::new(vec![3], vec![1.0, -1.0, 0.5]).unwrap();
    let bytes = TensorFile::Real(t).to_bytes().unwrap();
    // 1.0 = 0x3F800000, -1.0 = 0xBF800000, 0.5 = 0x3F000000
    let expected = [0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x80, 0xBF, 0x00, 0x00, 0x00, 0x3F];
    assert_eq!(&bytes[payload_offset(1)..], &expected);
}

#[test]
fn random_matrix_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f32> = (0..128 * 128).map(|_| rng.random_range(-10.0..10.0)).collect();
    let t = Tensor::new(vec![128, 128], data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.bbqt");
    write_tensor(&t, &p).unwrap();
    assert_eq!(read_tensor(&p).unwrap(), t);
}

#[test]
fn bad_magic_is_rejected() {
    let mut bytes = TensorFile::Real(Tensor::zeros(vec![2]).unwrap()).to_bytes().unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    assert!(matches!(TensorFile::from_bytes(&bytes), Err(Error::BadMagic { .. })));
}

#[test]
fn truncated_payload_is_rejected() {
    let bytes = TensorFile::Real(Tensor::zeros(vec![2, 2]).unwrap()).to_bytes().unwrap();
    let cut = &bytes[..payload_offset(2) + 12];
    assert!(matches!(
        TensorFile::from_bytes(cut),
        Err(Error::Truncated { expected: 16, found: 12 })
    ));
}

#[test]
fn unknown_dtype_is_rejected() {
    let mut bytes = TensorFile::Real(Tensor::zeros(vec![2]).unwrap()).to_bytes().unwrap();
    bytes[8] = 7;
    assert!(matches!(TensorFile::from_bytes(&bytes), Err(Error::UnknownDtype(7))));
}

#[test]
fn non_finite_values_are_rejected() {
    assert!(matches!(
        Tensor::new(vec![2], vec![1.0, f32::NAN]),
        Err(Error::NonFinite { index: 1, .. })
    ));
    assert!(Tensor::new(vec![1], vec![f32::INFINITY]).is_err());
    assert!(Tensor::new(vec![3], vec![1.0]).is_err());
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_tensor(dir.path().join("nope")), Err(Error::Io { .. })));
}

#[test]
fn csv_examples() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.csv");
    emit_csv::<String>(&["iter", "loss"], &[], &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().trim_end(), "iter,loss");

    emit_csv(&["iter", "loss"], &[vec!["0", "2.5"]], &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().trim_end(), "iter,loss\n0,2.5");

    let rows: Vec<Vec<String>> = (0..3).map(|i| vec![i.to_string(), "1".into()]).collect();
    emit_csv(&["iter", "loss"], &rows, &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 4);
}

proptest! {
    #[test]
    fn bytes_round_trip_bit_exactly(
        shape in prop::collection::vec(1usize..6, 1..4),
        seed in any::<u64>(),
    ) {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random::<u32>() & 0x7F7F_FFFF) * if rng.random() { 1.0 } else { -1.0 }).collect();
        let t = Tensor::new(shape.clone(), data).unwrap();
        let bytes = TensorFile::Real(t.clone()).to_bytes().unwrap();
        prop_assert_eq!(bytes.len(), payload_offset(shape.len()) + 4 * n);
        match TensorFile::from_bytes(&bytes).unwrap() {
            TensorFile::Real(back) => {
                prop_assert_eq!(back.shape(), t.shape());
                for (a, b) in back.data().iter().zip(t.data()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            other => prop_assert!(false, "unexpected {:?}", other),
        }
    }
}
