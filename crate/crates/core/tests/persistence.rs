mod common;

use std::fs;

use leakguard_core::persistence::{
    load_bundle, open_state, read_state, recover_state, save_bundle, seal_state, sync_state, synced_blobs,
    write_state, SessionStore,
};
use leakguard_core::{DetectorState, EncryptedState, Error, ModelBundle, StateKey};

use common::{fixture, stream, uniform_queries};

fn bundle() -> ModelBundle {
    let f = fixture();
    f.dep.bundle(&f.data)
}

fn assert_same_state(a: &DetectorState, b: &DetectorState) {
    assert_eq!(a.t(), b.t());
    assert_eq!(a.r_cum().to_bits(), b.r_cum().to_bits());
    assert_eq!(a.d_cum().to_bits(), b.d_cum().to_bits());
    assert_eq!(a.class_counts(), b.class_counts());
    assert_eq!(a.encoded_history(), b.encoded_history());
    assert_eq!(a.verdicts(), b.verdicts());
}

#[test]
fn bundle_file_round_trip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let original = bundle();
    let first = dir.path().join("a.sodm");
    let second = dir.path().join("b.sodm");
    save_bundle(&original, &first).unwrap();
    let loaded = load_bundle(&first).unwrap();
    assert_eq!(loaded, original);
    save_bundle(&loaded, &second).unwrap();
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
    assert_eq!(&fs::read(&first).unwrap()[..4], b"SODM");
}

#[test]
fn loaded_bundle_predicts_identically() {
    let original = bundle();
    let loaded = ModelBundle::from_bytes(&original.to_bytes().unwrap()).unwrap();
    let queries = uniform_queries(1000, original.meta.input_dim, 5);
    for x in queries.iter_rows() {
        let (a, b) = (original.autoencoder.encode(x).unwrap(), loaded.autoencoder.encode(x).unwrap());
        assert_eq!(a, b);
        assert_eq!(
            original.autoencoder.reconstruction_mse(x).unwrap().to_bits(),
            loaded.autoencoder.reconstruction_mse(x).unwrap().to_bits()
        );
        assert_eq!(original.service.predict_proba(&a).unwrap(), loaded.service.predict_proba(&b).unwrap());
    }
}

#[test]
fn every_truncation_is_a_format_error() {
    let bytes = bundle().to_bytes().unwrap();
    let step = (bytes.len() / 97).max(1);
    for cut in (0..bytes.len()).step_by(step) {
        match ModelBundle::from_bytes(&bytes[..cut]) {
            Err(Error::Format { .. }) => {}
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
    let mut extended = bytes.clone();
    extended.push(0);
    assert!(matches!(ModelBundle::from_bytes(&extended), Err(Error::Format { .. })));
    let mut wrong_magic = bytes;
    wrong_magic[0] = b'X';
    assert!(matches!(ModelBundle::from_bytes(&wrong_magic), Err(Error::Format { .. })));
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_bundle(&dir.path().join("none.sodm")), Err(Error::Io { .. })));
    assert!(matches!(read_state(&dir.path().join("none.sodx")), Err(Error::Io { .. })));
    let blob = seal_state(&DetectorState::new(3), &StateKey::generate()).unwrap();
    assert!(matches!(sync_state(&blob, &dir.path().join("absent")), Err(Error::Io { .. })));
}

#[test]
fn sealed_state_never_exposes_plaintext() {
    let f = fixture();
    let state = stream(&f.dep, &uniform_queries(12, f.data.train.input_dim(), 2));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.sodx");
    write_state(&path, &seal_state(&state, &StateKey::generate()).unwrap()).unwrap();
    let disk = fs::read(&path).unwrap();
    let needles: Vec<[u8; 8]> = [state.r_cum(), state.d_cum(), state.encoded_history()[3][0]]
        .iter()
        .map(|v| v.to_le_bytes())
        .collect();
    for needle in needles {
        assert!(!disk.windows(8).any(|w| w == needle));
    }
}

#[test]
fn state_round_trip_and_tamper() {
    let f = fixture();
    let state = stream(&f.dep, &uniform_queries(15, f.data.train.input_dim(), 3));
    let key = StateKey::generate();
    let blob = seal_state(&state, &key).unwrap();
    let reopened = open_state(&EncryptedState::from_bytes(&blob.to_bytes()).unwrap(), &key).unwrap();
    assert_same_state(&state, &reopened);
    assert!(matches!(open_state(&blob, &StateKey::generate()), Err(Error::Tamper)));
    let again = seal_state(&state, &key).unwrap();
    assert_ne!(again.nonce, blob.nonce);
}

#[test]
fn store_recovers_from_sync_after_local_loss() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let sync = dir.path().join("sync");
    fs::create_dir(&sync).unwrap();
    let key = StateKey::generate();
    let store = SessionStore::new(dir.path().join("local.sodx"), Some(sync.clone()), key.clone());
    let queries = uniform_queries(25, f.data.train.input_dim(), 4);
    let mut state = store.load(f.dep.service.num_classes()).unwrap();
    for row in queries.iter_rows() {
        state
            .observe(row, &f.dep.autoencoder, &f.dep.service, &f.dep.detector, &f.dep.calibration)
            .unwrap();
        store.persist(&state).unwrap();
    }
    // Periodic syncs at t = 10 and t = 20.
    assert_eq!(synced_blobs(&sync).unwrap().len(), 2);
    store.sync_now(&state).unwrap();
    fs::remove_file(&store.path).unwrap();
    let restored = store.load(f.dep.service.num_classes()).unwrap();
    assert_same_state(&state, &restored);

    // A corrupted newest copy falls back to the previous one.
    let newest = synced_blobs(&sync).unwrap()[0].1.clone();
    let mut bytes = fs::read(&newest).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&newest, bytes).unwrap();
    let (path, older) = recover_state(&sync, &key).unwrap().unwrap();
    assert_ne!(path, newest);
    assert_eq!(older.t(), 20);

    // A tampered local file is an error, not a silent reset.
    write_state(&store.path, &seal_state(&state, &StateKey::generate()).unwrap()).unwrap();
    assert!(matches!(store.load(f.dep.service.num_classes()), Err(Error::Tamper)));
}
