use std::fs;

use particle_heads::data::{generate_dataset, read_dataset, write_dataset, Cursor, DataError, DatasetReader};
use particle_heads::sim::{step_state, SimConfig};

fn cfg() -> SimConfig {
    SimConfig {
        particle_count: 4,
        box_width: 7.0,
        box_height: 7.0,
        steps_per_trajectory: 32,
        ..SimConfig::default()
    }
}

#[test]
fn round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.pds");
    let ds = generate_dataset(&cfg(), &[4, 5], 1).unwrap();
    write_dataset(&path, &ds).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.len(), 64);
    for i in 0..ds.len() {
        let (a, b) = (ds.pair(i), back.pair(i));
        let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.x.to_input_rows()), bits(&b.x.to_input_rows()));
        assert_eq!(bits(&a.y.to_input_rows()), bits(&b.y.to_input_rows()));
    }
    assert_eq!(back.seeds, vec![4, 5]);
}

#[test]
fn truncated_file_names_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.pds");
    write_dataset(&path, &generate_dataset(&cfg(), &[1], 0).unwrap()).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    match read_dataset(&path) {
        Err(DataError::Truncated { expected, actual }) => assert_eq!(expected - actual, 10),
        other => panic!("unexpected {other:?}"),
    }
    fs::write(&path, &bytes[..20]).unwrap();
    let err = read_dataset(&path).unwrap_err();
    assert!(err.to_string().contains("byte 16"), "{err}");
}

#[test]
fn bad_magic_and_pair_count_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.pds");
    write_dataset(&path, &generate_dataset(&cfg(), &[1], 0).unwrap()).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    assert!(read_dataset(&path).unwrap_err().to_string().contains("byte 0"));

    bytes[0] = b'P';
    bytes[16] -= 1; // pair_count low byte
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_dataset(&path), Err(DataError::Format { .. })));
}

#[test]
fn stored_pairs_are_self_consistent() {
    let c = cfg();
    let ds = generate_dataset(&c, &[8, 9, 10], 2).unwrap();
    for i in 0..ds.len() {
        let p = ds.pair(i);
        let y = step_state(&p.x, &c).unwrap();
        for (a, b) in y.pos.iter().chain(&y.vel).zip(p.y.pos.iter().chain(&p.y.vel)) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn streaming_reader_matches_memory_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.pds");
    let ds = generate_dataset(&cfg(), &[1, 2, 3, 4], 0).unwrap();
    write_dataset(&path, &ds).unwrap();
    let mut r = DatasetReader::open(&path).unwrap();
    let first = r.next_batch(64).unwrap();
    assert_eq!(first, ds.sample_batch(64, Cursor(0)).unwrap().0);
    let saved: Cursor = r.cursor().to_string().parse().unwrap();
    let second = r.next_batch(64).unwrap();
    let mut resumed = DatasetReader::open(&path).unwrap();
    resumed.seek(saved).unwrap();
    assert_eq!(resumed.next_batch(64).unwrap(), second);
    assert!(matches!(r.next_batch(1), Err(DataError::Exhausted { .. })));
}
