use moebuf::checkpoint::{decode, encode, load, save, MAGIC};
use moebuf::Error;
use moebuf_core::{ModelConfig, ToyModel};

fn model(seed: u64) -> ToyModel {
    ToyModel::init(ModelConfig { seed, ..ModelConfig::default() }).unwrap()
}

fn all_bits(m: &ToyModel) -> Vec<u64> {
    m.matrices().iter().flat_map(|x| x.as_slice().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model(17);
    save(&m, &path).unwrap();
    let back = load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(all_bits(&back), all_bits(&m));
    assert_eq!(encode(&back), encode(&m));
}

#[test]
fn same_seed_same_bytes() {
    assert_eq!(encode(&model(3)), encode(&model(3)));
    assert_ne!(encode(&model(3)), encode(&model(4)));
}

#[test]
fn bad_magic_rejected() {
    let mut bytes = encode(&model(0));
    bytes[0] = b'X';
    let err = decode(&bytes).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)));
    assert!(err.to_string().contains("magic"), "{err}");
}

#[test]
fn bad_version_rejected() {
    let mut bytes = encode(&model(0));
    bytes[MAGIC.len()] = 9;
    let err = decode(&bytes).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
}

#[test]
fn truncated_and_trailing_rejected() {
    let bytes = encode(&model(0));
    assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    assert!(decode(&bytes[..5]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode(&long).is_err());
}

#[test]
fn inconsistent_shape_rejected() {
    let mut bytes = encode(&model(0));
    // First matrix's row count sits right after the header and matrix count.
    let at = MAGIC.len() + 4 + 9 * 8 + 8;
    bytes[at] ^= 1;
    let err = decode(&bytes).unwrap_err().to_string();
    assert!(err.contains("embedding"), "{err}");
}
