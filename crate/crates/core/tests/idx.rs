use std::path::Path;

use fednsim::data::read_idx;
use fednsim::{Error, IdxError};

fn images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for v in [n, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn labels(values: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend_from_slice(&(values.len() as u32).to_be_bytes());
    b.extend_from_slice(values);
    b
}

fn write(dir: &Path, img: &[u8], lab: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
    let i = dir.join("images.idx");
    let l = dir.join("labels.idx");
    std::fs::write(&i, img).unwrap();
    std::fs::write(&l, lab).unwrap();
    (i, l)
}

#[test]
fn reads_a_hand_built_pair() {
    let dir = tempfile::tempdir().unwrap();
    let (i, l) = write(dir.path(), &images(2, 2, 2, &[0, 255, 51, 102, 255, 0, 0, 0]), &labels(&[3, 1]));
    let ds = read_idx(&i, &l).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.dim(), 4);
    assert_eq!(ds.num_classes, 4);
    assert_eq!(ds.labels, vec![3, 1]);
    assert_eq!(ds.features.row(0), &[0.0, 1.0, 0.2, 0.4]);
    assert_eq!(ds.features.row(1), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn rejects_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = images(1, 1, 1, &[7]);
    img[3] = 2;
    let (i, l) = write(dir.path(), &img, &labels(&[0]));
    assert!(matches!(read_idx(&i, &l), Err(Error::Idx(IdxError::BadMagic { found: 0x0000_0802, .. }))));
    let (i, l) = write(dir.path(), &images(1, 1, 1, &[7]), &images(1, 1, 1, &[7]));
    assert!(matches!(read_idx(&i, &l), Err(Error::Idx(IdxError::BadMagic { .. }))));
}

#[test]
fn rejects_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let (i, l) = write(dir.path(), &images(2, 2, 2, &[1, 2, 3]), &labels(&[0, 1]));
    match read_idx(&i, &l) {
        Err(Error::Idx(IdxError::Truncated { needed, found, .. })) => assert_eq!((needed, found), (24, 19)),
        other => panic!("{other:?}"),
    }
    let (i, l) = write(dir.path(), &[0, 0, 8], &labels(&[0]));
    assert!(matches!(read_idx(&i, &l), Err(Error::Idx(IdxError::Truncated { .. }))));
}

#[test]
fn rejects_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (i, l) = write(dir.path(), &images(2, 1, 1, &[1, 2]), &labels(&[0, 1, 1]));
    assert!(matches!(
        read_idx(&i, &l),
        Err(Error::Idx(IdxError::CountMismatch { images: 2, labels: 3 }))
    ));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert!(matches!(read_idx(&missing, &missing), Err(Error::Idx(IdxError::Io { .. }))));
}
