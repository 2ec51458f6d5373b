use chunkstream::decoder::{run_session, BeamConfig, DecodeMode};
use chunkstream::model::{EncoderKind, SequenceModel, TinyTransformer, TransformerConfig};
use chunkstream::training::{gen_dataset, SyntheticTaskSpec};
use chunkstream::StrategyConfig;

#[test]
fn saved_models_decode_identically() {
    let spec = SyntheticTaskSpec::default();
    let utts = gen_dataset(&spec, 5, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for kind in [EncoderKind::Unidirectional, EncoderKind::Bidirectional] {
        let m = TinyTransformer::new(TransformerConfig::new(spec.frame_dim, kind), spec.vocab(), 3).unwrap();
        let path = dir.path().join("m.cstm");
        m.save(&path).unwrap();
        let back = TinyTransformer::load(&path).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.vocab(), m.vocab());
        assert_eq!(back.params(), m.params());
        for u in &utts {
            let s = StrategyConfig::LocalAgreement;
            let a = run_session(&m, u, 0.5, s, &BeamConfig::default(), DecodeMode::ForcedRedecode).unwrap();
            let b = run_session(&back, u, 0.5, s, &BeamConfig::default(), DecodeMode::ForcedRedecode).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn truncated_files_are_rejected() {
    let spec = SyntheticTaskSpec::default();
    let m = TinyTransformer::new(TransformerConfig::new(spec.frame_dim, EncoderKind::Unidirectional), spec.vocab(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cstm");
    m.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(TinyTransformer::load(&path).is_err());
}
