use std::fs;

use resnet_mg::idx::{encode_images, encode_labels, load_mnist_idx, parse_images, parse_labels};
use resnet_mg::Error;

fn two_images() -> (Vec<u8>, Vec<u8>) {
    let pixels: Vec<u8> = (0..2 * 28 * 28).map(|i| (i * 37 % 256) as u8).collect();
    (encode_images(28, 28, &pixels), encode_labels(&[7, 0]))
}

#[test]
fn two_image_fixture_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = two_images();
    // Header bytes written out by hand.
    assert_eq!(&img[..16], &[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28]);
    assert_eq!(&lbl[..8], &[0, 0, 8, 1, 0, 0, 0, 2]);
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    fs::write(&ip, &img).unwrap();
    fs::write(&lp, &lbl).unwrap();
    let ds = load_mnist_idx(&ip, &lp).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!((ds.rows, ds.cols), (28, 28));
    assert_eq!(ds.labels(), &[7, 0]);
    for (k, raw) in img[16..].iter().enumerate() {
        let got = ds.image(k / 784)[k % 784];
        assert_eq!(got, f64::from(*raw) / 255.0);
        assert_eq!((got * 255.0).round() as u8, *raw);
    }
}

#[test]
fn labels_with_image_magic_are_rejected_at_offset_zero() {
    let mut lbl = encode_labels(&[1, 2]);
    lbl[3] = 0x03;
    match parse_labels(&lbl) {
        Err(Error::Parse { offset, msg }) => {
            assert_eq!(offset, 0);
            assert!(msg.contains("magic"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn truncated_image_payload_names_offset() {
    let (img, _) = two_images();
    let cut = &img[..img.len() - 10];
    match parse_images(cut) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, cut.len() as u64),
        other => panic!("{other:?}"),
    }
    match parse_images(&img[..11]) {
        Err(Error::Parse { offset, msg }) => {
            assert_eq!(offset, 11);
            assert!(msg.contains("truncated"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn count_and_size_mismatches_are_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (img, _) = two_images();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    fs::write(&ip, &img).unwrap();
    fs::write(&lp, encode_labels(&[1, 2, 3])).unwrap();
    assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::Parse { offset: 4, .. })));

    fs::write(&ip, encode_images(4, 4, &[0; 32])).unwrap();
    fs::write(&lp, encode_labels(&[1, 2])).unwrap();
    assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::Parse { offset: 8, .. })));
}

#[test]
fn missing_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ip = dir.path().join("nope-images");
    let err = load_mnist_idx(&ip, &dir.path().join("nope-labels")).unwrap_err();
    assert!(err.to_string().contains("nope-images"), "{err}");
}
