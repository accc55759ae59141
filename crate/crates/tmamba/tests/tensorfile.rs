use proptest::prelude::*;
use tmamba::tensorfile::{read_tensorfile, write_tensorfile, Entry, FormatError, TensorData, TensorFile};
use tmamba_core::numcore::Tensor;

fn sample_file() -> TensorFile {
    let mut f = TensorFile::new();
    f.insert("image", Entry::f64(&[1, 2, 3], vec![0.0, 0.5, -1.25, 3.0, 1e-300, 7.0]));
    f.insert("mask", Entry::u8(&[2, 3], vec![0, 1, 1, 0, 0, 1]));
    f.insert("bins", Entry::i32(&[3], vec![-4, 0, 9]));
    f
}

#[test]
fn round_trip_keeps_order_shapes_and_bits() {
    let f = sample_file();
    let bytes = f.encode().unwrap();
    let back = TensorFile::decode(&bytes).unwrap();
    assert_eq!(back, f);
    assert_eq!(back.names().collect::<Vec<_>>(), ["image", "mask", "bins"]);
    assert_eq!(back.bytes("mask").unwrap(), &[0, 1, 1, 0, 0, 1]);
    assert_eq!(back.ints("bins").unwrap(), &[-4, 0, 9]);
    assert_eq!(back.tensor("image").unwrap().shape(), &[1, 2, 3]);
}

#[test]
fn layout_is_little_endian_with_name_table_first() {
    let mut f = TensorFile::new();
    f.insert("ab", Entry::i32(&[1], vec![0x0102_0304]));
    let b = f.encode().unwrap();
    let mut want = b"TMTN".to_vec();
    want.push(1);
    want.extend(1u32.to_le_bytes());
    want.extend(2u32.to_le_bytes());
    want.extend(b"ab");
    want.extend([2, 1]);
    want.extend(1u32.to_le_bytes());
    want.extend([4, 3, 2, 1]);
    assert_eq!(b, want);
}

#[test]
fn empty_table_round_trips() {
    let f = TensorFile::new();
    let b = f.encode().unwrap();
    assert_eq!(b.len(), 9);
    assert!(TensorFile::decode(&b).unwrap().is_empty());
}

#[test]
fn file_round_trip_creates_parent_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a/b/c.tmtn");
    write_tensorfile(&path, &sample_file()).unwrap();
    assert_eq!(read_tensorfile(&path).unwrap(), sample_file());
}

#[test]
fn corrupt_headers_are_rejected() {
    let good = sample_file().encode().unwrap();
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(TensorFile::decode(&bad), Err(FormatError::BadMagic(_))));
    let mut bad = good.clone();
    bad[4] = 2;
    assert!(matches!(TensorFile::decode(&bad), Err(FormatError::UnsupportedVersion(2))));
    let mut trailing = good.clone();
    trailing.push(0);
    assert!(TensorFile::decode(&trailing).is_err());
}

#[test]
fn corrupt_extent_is_truncation() {
    let mut f = TensorFile::new();
    f.insert("x", Entry::f64(&[2], vec![1.0, 2.0]));
    let mut b = f.encode().unwrap();
    // extent sits after magic, version, count, name table, dtype and rank
    let at = 4 + 1 + 4 + 4 + 1 + 2;
    b[at..at + 4].copy_from_slice(&1000u32.to_le_bytes());
    assert!(matches!(TensorFile::decode(&b), Err(FormatError::Truncated(_))));
    b[at..at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(matches!(TensorFile::decode(&b), Err(FormatError::Truncated(_))));
}

#[test]
fn unknown_dtype_and_wrong_dtype_access() {
    let mut f = TensorFile::new();
    f.insert("x", Entry::u8(&[1], vec![1]));
    let mut b = f.encode().unwrap();
    b[4 + 1 + 4 + 4 + 1] = 9;
    assert!(matches!(TensorFile::decode(&b), Err(FormatError::BadDtype(9))));
    assert!(matches!(f.tensor("x"), Err(FormatError::DtypeMismatch { .. })));
    assert!(matches!(f.ints("x"), Err(FormatError::DtypeMismatch { .. })));
    assert!(matches!(f.get("y"), Err(FormatError::Missing(_))));
}

#[test]
fn tensor_entries_keep_values() {
    let t = Tensor::from_fn(&[2, 2], |i| i as f64 * 0.1);
    let mut f = TensorFile::new();
    f.insert_tensor("t", &t);
    let back = TensorFile::decode(&f.encode().unwrap()).unwrap();
    assert_eq!(back.tensor("t").unwrap(), t);
}

fn entry() -> impl Strategy<Value = Entry> {
    prop::collection::vec(1usize..4, 0..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop_oneof![
            prop::collection::vec(-1e6f64..1e6, n).prop_map({
                let s = shape.clone();
                move |d| Entry::f64(&s, d)
            }),
            prop::collection::vec(any::<i32>(), n).prop_map({
                let s = shape.clone();
                move |d| Entry::i32(&s, d)
            }),
            prop::collection::vec(any::<u8>(), n).prop_map(move |d| Entry::u8(&shape, d)),
        ]
    })
}

proptest! {
    #[test]
    fn arbitrary_files_round_trip(entries in prop::collection::vec(("[a-z_]{1,8}", entry()), 0..5)) {
        let mut f = TensorFile::new();
        for (name, e) in &entries {
            f.insert(name, e.clone());
        }
        let back = TensorFile::decode(&f.encode().unwrap()).unwrap();
        prop_assert_eq!(back, f);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
        let _ = TensorFile::decode(&bytes);
    }

    #[test]
    fn truncated_files_are_rejected(cut in 0usize..64) {
        let good = sample_file().encode().unwrap();
        let cut = cut.min(good.len() - 1);
        prop_assert!(TensorFile::decode(&good[..cut]).is_err());
    }
}

#[test]
fn data_len_matches_dtype() {
    assert_eq!(TensorData::U8(vec![1, 2]).dtype(), "u8");
    assert_eq!(TensorData::F64(vec![]).len(), 0);
}
