use angiovae::nifti::{
    encode_nifti, parse_nifti, read_mask, read_nifti, write_mask, write_nifti, write_nifti_as,
    NiftiError, HEADER_SIZE,
};
use angiovae::volume::{BinaryMask3, DataType, Volume};
use proptest::prelude::*;

fn dtype_strategy() -> impl Strategy<Value = DataType> {
    prop_oneof![Just(DataType::U8), Just(DataType::I16), Just(DataType::F32)]
}

fn representable(dtype: DataType, raw: i64, f: f32) -> f32 {
    match dtype {
        DataType::U8 => raw.rem_euclid(256) as f32,
        DataType::I16 => (raw.rem_euclid(65536) - 32768) as f32,
        DataType::F32 => f,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn file_round_trip_is_bit_exact(
        dims in [1usize..9, 1usize..9, 1usize..9],
        spacing in [0.1f32..5.0, 0.1f32..5.0, 0.1f32..5.0],
        dtype in dtype_strategy(),
        gzip in any::<bool>(),
        seed in prop::collection::vec((any::<i64>(), -1e30f32..1e30), 512),
    ) {
        let n = dims.iter().product::<usize>();
        let data = seed.iter().take(n).map(|&(r, f)| representable(dtype, r, f)).collect();
        let v = Volume::new(dims, spacing, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if gzip { "v.nii.gz" } else { "v.nii" });
        write_nifti_as(&v, &path, gzip, dtype).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        prop_assert_eq!(bytes.starts_with(&[0x1F, 0x8B]), gzip);
        let back = read_nifti(&path).unwrap();
        prop_assert_eq!(back.dims(), dims);
        prop_assert_eq!(back.spacing(), spacing);
        prop_assert_eq!(back.source_dtype, dtype);
        prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn gzip_is_detected_by_magic_not_name() {
    let v = Volume::new(
        [2, 3, 4],
        [1.0, 2.0, 3.0],
        (0..24).map(|i| i as f32).collect(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let plain_named_gz = dir.path().join("a.nii.gz");
    let gz_named_plain = dir.path().join("b.nii");
    write_nifti(&v, &plain_named_gz, false).unwrap();
    write_nifti(&v, &gz_named_plain, true).unwrap();
    assert_eq!(read_nifti(&plain_named_gz).unwrap().data(), v.data());
    assert_eq!(read_nifti(&gz_named_plain).unwrap().data(), v.data());
}

#[test]
fn float64_datatype_is_rejected() {
    let v = Volume::filled([2, 2, 2], 1.0).unwrap();
    let mut bytes = encode_nifti(&v, DataType::F32).unwrap();
    bytes[70..72].copy_from_slice(&64i16.to_le_bytes());
    bytes[72..74].copy_from_slice(&64i16.to_le_bytes());
    match parse_nifti(&bytes) {
        Err(NiftiError::UnsupportedDatatype(64)) => {}
        other => panic!("expected unsupported datatype, got {other:?}"),
    }
}

#[test]
fn values_outside_the_target_type_are_refused() {
    let v = Volume::new([2, 1, 1], [1.0; 3], vec![0.0, 300.0]).unwrap();
    assert!(matches!(
        encode_nifti(&v, DataType::U8),
        Err(NiftiError::NotRepresentable { .. })
    ));
    let frac = Volume::new([2, 1, 1], [1.0; 3], vec![0.0, 0.5]).unwrap();
    assert!(encode_nifti(&frac, DataType::I16).is_err());
}

#[test]
fn two_file_names_and_bad_input_are_refused() {
    let v = Volume::filled([2, 2, 2], 1.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        write_nifti(&v, dir.path().join("x.hdr"), false),
        Err(NiftiError::TwoFileVariant)
    ));
    assert!(matches!(
        parse_nifti(&[0u8; 10]),
        Err(NiftiError::Truncated { .. })
    ));
    let mut bytes = encode_nifti(&v, DataType::F32).unwrap();
    bytes[344..348].copy_from_slice(b"abcd");
    assert!(matches!(parse_nifti(&bytes), Err(NiftiError::BadMagic(_))));
    let mut short = encode_nifti(&v, DataType::F32).unwrap();
    short.truncate(HEADER_SIZE + 10);
    assert!(matches!(
        parse_nifti(&short),
        Err(NiftiError::Truncated { .. })
    ));
}

#[test]
fn masks_are_stored_as_u8_zero_one() {
    let template = Volume::filled([4, 3, 2], 0.0).unwrap();
    let mask = BinaryMask3::from_fn([4, 3, 2], |x, y, z| (x + y + z) % 2 == 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.nii.gz");
    write_mask(&mask, &template, &path, true).unwrap();
    let raw = read_nifti(&path).unwrap();
    assert_eq!(raw.source_dtype, DataType::U8);
    assert!(raw.data().iter().all(|&v| v == 0.0 || v == 1.0));
    assert_eq!(read_mask(&path).unwrap(), mask);
}

#[test]
fn metadata_rewrite_keeps_uninterpreted_header_bytes() {
    let v = Volume::new(
        [3, 2, 2],
        [1.5, 1.5, 2.0],
        (0..12).map(|i| i as f32).collect(),
    )
    .unwrap();
    let mut bytes = encode_nifti(&v, DataType::I16).unwrap();
    // descrip and intent_name
    bytes[148..159].copy_from_slice(b"scanner TOF");
    bytes[328..332].copy_from_slice(b"abcd");
    let first = parse_nifti(&bytes).unwrap();
    let again = encode_nifti(&first, DataType::I16).unwrap();
    assert_eq!(&again[148..159], b"scanner TOF");
    assert_eq!(&again[328..332], b"abcd");
    assert_eq!(parse_nifti(&again).unwrap().data(), v.data());
}
