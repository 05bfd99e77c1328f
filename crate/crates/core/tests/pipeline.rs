use unipatch::pipeline::{self, Model, PipelineConfig};
use unipatch::synth::{self, SynthSpec};
use unipatch::tokred::MergeMode;
use unipatch::vistream::{PixelPlane, SourceKind, VisualInput};
use unipatch::Error;

/// Mean encoder drift at tau = 0.1 on the seeded corpus below, recorded
/// when the pipeline was first validated.
const DRIFT_BASELINE: f64 = 4.48e-4;

fn textured(h: usize, w: usize, k: usize) -> PixelPlane {
    PixelPlane::from_fn(h, w, |r, c| ((r * 13 + c * 7 + k * 29) % 31) as f64 / 30.0).unwrap()
}

fn model(config: &PipelineConfig) -> Model {
    Model::init(config).unwrap()
}

fn corpus(spec: &str, config: &PipelineConfig, seed: u64) -> VisualInput {
    let spec: SynthSpec = spec.parse().unwrap();
    synth::synthesize(&spec, &model(config).encoder.patch_w, config.patch, config.tau, seed).unwrap()
}

#[test]
fn image_keeps_every_patch() {
    let config = PipelineConfig::new("", SourceKind::Image2D);
    let input = VisualInput::new(SourceKind::Image2D, vec![textured(224, 224, 0)]).unwrap();
    let out = pipeline::run_on_input(&input, &config, &model(&config)).unwrap();
    let r = &out.report;
    assert_eq!((r.tokens_before, r.tokens_after_merge, r.tokens_after_prune), (196, 196, 196));
    assert!(!r.merged);
    assert_eq!(r.rate, 0.0);
    assert_eq!(r.encoder_output_shape, [196, config.encoder.d_model]);
    assert_eq!(r.projector_output_shape, [196, config.d_llm]);
}

#[test]
fn identical_frames_collapse_to_first_plane() {
    let config = PipelineConfig::new("", SourceKind::Video);
    let frame = textured(224, 224, 1);
    let input = VisualInput::new(SourceKind::Video, vec![frame; 8]).unwrap();
    let r = pipeline::run_on_input(&input, &config, &model(&config)).unwrap().report;
    assert_eq!(r.tokens_before, 8 * 196);
    assert_eq!(r.tokens_after_merge, 8 * 49);
    assert_eq!(r.tokens_after_prune, 49);
    assert_eq!(r.rate, 7.0 / 8.0);
    assert_eq!(r.per_plane[0].kept, 49);
    assert!(r.per_plane[1..].iter().all(|p| p.kept == 0 && p.pruned == 49));
}

#[test]
fn redundancy_extremes() {
    let mut config = PipelineConfig::new("", SourceKind::Volume3D);
    config.seed = 3;
    let m = model(&config);
    for (spec, rate) in [("volume:0:4:64x96", 0.0), ("volume:1:4:64x96", 0.75)] {
        let input = corpus(spec, &config, 11);
        let r = pipeline::run_on_input(&input, &config, &m).unwrap().report;
        assert_eq!(r.rate, rate, "{spec}");
    }
}

#[test]
fn merge_can_be_forced_either_way() {
    let input = VisualInput::new(SourceKind::Video, vec![textured(64, 64, 0), textured(64, 64, 5)]).unwrap();
    let mut config = PipelineConfig::new("", SourceKind::Video);
    config.tau = 0.0;
    config.merge = MergeMode::Off;
    let r = pipeline::run_on_input(&input, &config, &model(&config)).unwrap().report;
    assert_eq!((r.merged, r.tokens_after_merge), (false, 32));

    let image = VisualInput::new(SourceKind::Image2D, vec![textured(64, 64, 0)]).unwrap();
    config.merge = MergeMode::On;
    let r = pipeline::run_on_input(&image, &config, &model(&config)).unwrap().report;
    assert_eq!((r.merged, r.tokens_after_merge), (true, 4));
}

#[test]
fn stride_drops_planes_before_reduction() {
    let mut config = PipelineConfig::new("", SourceKind::Video);
    config.stride = 3;
    let frames = (0..7).map(|k| textured(32, 32, k)).collect();
    let input = VisualInput::new(SourceKind::Video, frames).unwrap();
    let out = pipeline::run_on_input(&input, &config, &model(&config)).unwrap();
    assert_eq!(out.report.planes, 3);
    assert_eq!(out.reduced.plane_index, [0, 3, 6]);
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scan.raw");
    let mut config = PipelineConfig::new(&path, SourceKind::Volume3D);
    config.seed = 5;
    unipatch::io::save_input(&path, &corpus("volume:0.5:5:64x64", &config, 2)).unwrap();
    let a = pipeline::run_pipeline(&config).unwrap();
    let b = pipeline::run_pipeline(&config).unwrap();
    assert_eq!(a.to_json_without_timings().unwrap(), b.to_json_without_timings().unwrap());

    config.seed = 6;
    let c = pipeline::run_pipeline(&config).unwrap();
    assert_eq!(c.tokens_before, a.tokens_before);
}

#[test]
fn bench_at_zero_has_no_drift() {
    let config = PipelineConfig::new("", SourceKind::Video);
    let input = corpus("video:0.5:4:64x64", &config, 1);
    let rows = pipeline::bench_tau(&input, &config, &model(&config), &[0.0]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].drift, 0.0);
}

#[test]
fn bench_rates_rise_with_tau() {
    let mut config = PipelineConfig::new("", SourceKind::Video);
    config.seed = 7;
    let input = corpus("video:0.629:8:448x448", &config, 99);
    let grid = [0.5, 0.0, 0.05, 0.1, 0.2];
    let rows = pipeline::bench_tau(&input, &config, &model(&config), &grid).unwrap();
    let taus: Vec<f64> = rows.iter().map(|r| r.tau).collect();
    assert_eq!(taus, grid);

    let mut sorted = rows.clone();
    sorted.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    assert!(sorted.windows(2).all(|w| w[0].rate <= w[1].rate));
    assert!(sorted.windows(2).all(|w| w[0].tokens_after_prune >= w[1].tokens_after_prune));

    let at_default = rows.iter().find(|r| r.tau == 0.1).unwrap();
    assert_eq!(at_default.rate, 7.0 * 123.0 / (8.0 * 196.0));
    assert!(
        (at_default.drift - DRIFT_BASELINE).abs() <= 0.1 * DRIFT_BASELINE,
        "drift {} drifted from baseline {DRIFT_BASELINE}",
        at_default.drift
    );
}

#[test]
fn bench_rejects_empty_grid() {
    let config = PipelineConfig::new("", SourceKind::Video);
    let input = corpus("video:0.5:2:64x64", &config, 1);
    let err = pipeline::bench_tau(&input, &config, &model(&config), &[]).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn bad_config_is_a_config_error() {
    let mut config = PipelineConfig::new("missing.pgm", SourceKind::Image2D);
    config.tau = -0.5;
    let err = pipeline::run_pipeline(&config).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");

    config.tau = 0.1;
    let err = pipeline::run_pipeline(&config).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}
