use hydra_hgr::tensor_io::FormatError;
use hydra_hgr::{read_tensor, write_tensor, Error, SeededRng, Tensor};
use proptest::prelude::*;

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0usize..6, 1..=4).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        // Raw bit patterns cover NaNs, infinities, subnormals and -0.0.
        prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
            .prop_map(move |data| Tensor::new(dims.clone(), data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn bytes_round_trip(t in tensor_strategy()) {
        let bytes = t.to_bytes();
        prop_assert_eq!(bytes.len(), t.encoded_len());
        let back = Tensor::from_bytes(&bytes).unwrap();
        prop_assert!(back.bit_eq(&t));
    }

    #[test]
    fn file_round_trip(t in tensor_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hydt");
        write_tensor(&path, &t).unwrap();
        prop_assert!(read_tensor(&path).unwrap().bit_eq(&t));
    }

    #[test]
    fn any_strict_prefix_is_truncated(t in tensor_strategy(), cut in 0usize..1000) {
        let bytes = t.to_bytes();
        let cut = 4 + cut % (bytes.len() - 4);
        prop_assert_eq!(Tensor::from_bytes(&bytes[..cut]), Err(FormatError::Truncated));
    }

    #[test]
    fn same_seed_same_stream(seed in any::<u64>()) {
        let (mut a, mut b) = (SeededRng::new(seed), SeededRng::new(seed));
        for _ in 0..10_000 {
            prop_assert_eq!(a.next(), b.next());
        }
    }
}

#[test]
fn empty_dimensions() {
    for dims in [vec![0], vec![3, 0], vec![0, 0, 2], vec![1, 2, 0, 4]] {
        let t = Tensor::zeros(dims.clone()).unwrap();
        assert!(t.is_empty());
        let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back.dims(), &dims[..]);
    }
}

#[test]
fn window_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.hydt");
    let data: Vec<f32> = (0..512 * 8 * 16).map(|i| i as f32).collect();
    write_tensor(&path, &Tensor::new(vec![512, 8, 16], data).unwrap()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 7 + 12 + 262_144);
    assert_eq!(&bytes[7..19], &[0, 2, 0, 0, 8, 0, 0, 0, 16, 0, 0, 0]);
    // Row-major: element (1, 0, 0) sits 128 floats into the payload.
    assert_eq!(&bytes[19 + 4 * 128..19 + 4 * 129], &128f32.to_le_bytes());
}

#[test]
fn read_errors_carry_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.hydt");
    match read_tensor(&missing) {
        Err(Error::Io { path, .. }) => assert_eq!(path, missing),
        other => panic!("expected an I/O error, got {other:?}"),
    }
    let bad = dir.path().join("bad.hydt");
    std::fs::write(&bad, b"XXXX\x01\x00\x01\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
    match read_tensor(&bad) {
        Err(Error::Format { path, kind }) => {
            assert_eq!(path, bad);
            assert_eq!(kind, FormatError::BadMagic);
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn header_field_errors() {
    let good = Tensor::new(vec![1], vec![1.0]).unwrap().to_bytes();
    let with = |i: usize, v: u8| {
        let mut b = good.clone();
        b[i] = v;
        Tensor::from_bytes(&b)
    };
    assert_eq!(with(4, 2), Err(FormatError::UnsupportedVersion(2)));
    assert_eq!(with(5, 1), Err(FormatError::UnsupportedDtype(1)));
    assert_eq!(with(6, 0), Err(FormatError::BadRank(0)));
    assert_eq!(with(6, 5), Err(FormatError::BadRank(5)));
    let mut long = good.clone();
    long.push(0);
    assert_eq!(Tensor::from_bytes(&long), Err(FormatError::TrailingBytes(1)));
}

#[test]
fn derived_streams_differ_from_parent_and_each_other() {
    let root = SeededRng::new(42);
    let firsts: Vec<u64> = (0..8).map(|l| root.derive(l).next()).collect();
    let mut uniq = firsts.clone();
    uniq.sort_unstable();
    uniq.dedup();
    assert_eq!(uniq.len(), firsts.len());
    assert!(!firsts.contains(&SeededRng::new(42).next()));
    assert_eq!(root.derive(3), SeededRng::new(42).derive(3));
}
