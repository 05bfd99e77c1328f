use unipatch::checkpoint::{self, ParamSet};
use unipatch::encoder::{self, EncoderConfig};
use unipatch::fusion::{DecoderConfig, DecoderParams};
use unipatch::projector::{ProjectorConfig, ProjectorParams};
use unipatch::Error;

#[test]
fn encoder_weights_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (payload, manifest) = (dir.path().join("enc.bin"), dir.path().join("enc.json"));
    let config = EncoderConfig::desk(2, 8, 2);
    let saved = encoder::init_params(&config, 1).unwrap();
    checkpoint::save(&saved, &payload, &manifest).unwrap();

    let mut loaded = encoder::init_params(&config, 2).unwrap();
    assert_ne!(loaded, saved);
    checkpoint::load_into(&mut loaded, &payload, &manifest).unwrap();
    assert_eq!(loaded, saved);
    assert_eq!(std::fs::metadata(&payload).unwrap().len() as usize, 8 * saved.parameter_count());
}

#[test]
fn names_are_unique_and_manifest_lists_every_tensor() {
    let params = DecoderParams::init(&DecoderConfig::default(), 0).unwrap();
    let (bytes, manifest) = checkpoint::encode(&params);
    let names: Vec<_> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    assert_eq!(manifest.tensors.iter().map(|t| t.name.clone()).collect::<Vec<_>>(), names);
    assert_eq!(bytes.len(), 8 * params.parameter_count());
}

#[test]
fn mismatched_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (payload, manifest) = (dir.path().join("p.bin"), dir.path().join("p.json"));
    let small = ProjectorParams::init(&ProjectorConfig::default(), 0).unwrap();
    checkpoint::save(&small, &payload, &manifest).unwrap();

    let wide = ProjectorConfig { d_llm: 16, ..ProjectorConfig::default() };
    let mut other = ProjectorParams::init(&wide, 0).unwrap();
    let before = other.clone();
    assert!(checkpoint::load_into(&mut other, &payload, &manifest).is_err());
    assert_eq!(other, before);

    std::fs::write(&payload, [0u8; 5]).unwrap();
    let mut same = small.clone();
    assert!(checkpoint::load_into(&mut same, &payload, &manifest).is_err());

    let err = checkpoint::load_into(&mut same, &dir.path().join("none.bin"), &manifest).unwrap_err();
    assert!(matches!(err, Error::Io { .. } | Error::MissingFile(_)), "{err}");
}

#[test]
fn same_seed_same_weights() {
    let config = EncoderConfig::desk(1, 8, 2);
    assert_eq!(encoder::init_params(&config, 9).unwrap(), encoder::init_params(&config, 9).unwrap());
    assert_eq!(checkpoint::derive_seed(5, 0), checkpoint::derive_seed(5, 0));
    assert_ne!(checkpoint::derive_seed(5, 0), checkpoint::derive_seed(5, 1));
}
