use cwssnet::data::{synth_scene, SynthConfig};
use cwssnet::pipeline::{prepare, DataConfig, Experiment};

fn small() -> (Experiment, SynthConfig) {
    let mut exp = Experiment {
        data: DataConfig {
            patch_size: 16,
            stride: 16,
            ..DataConfig::default()
        },
        ..Experiment::default()
    };
    exp.network.bands = 5;
    exp.network.classes = 4;
    let synth = SynthConfig {
        rows: 32,
        cols: 48,
        bands: 20,
        classes: 4,
        ..SynthConfig::default()
    };
    (exp, synth)
}

#[test]
fn pca_ignores_validation_only_pixels() {
    let (exp, synth) = small();
    let scene = synth_scene(3, &synth).unwrap();
    let prep = prepare(&scene.cube, &exp).unwrap();
    assert_eq!(prep.patches.len(), 6);
    assert_eq!(prep.patches.bands(), 5);

    let mut edited = scene.cube.clone();
    let (n, d) = (edited.cols(), edited.bands());
    for &k in &prep.val {
        let (r0, c0) = prep.patches.origins[k];
        for r in r0..r0 + 16 {
            for c in c0..c0 + 16 {
                for b in 0..d {
                    edited.data.data_mut()[(r * n + c) * d + b] += 10.0 * b as f64;
                }
            }
        }
    }
    let again = prepare(&edited, &exp).unwrap();
    assert_eq!(again.pca, prep.pca);
    assert_eq!((again.train, again.val), (prep.train, prep.val));
}

#[test]
fn mismatched_configuration_is_rejected() {
    let (mut exp, synth) = small();
    let scene = synth_scene(1, &synth).unwrap();
    exp.network.classes = 5;
    assert!(prepare(&scene.cube, &exp).is_err());
    let (mut exp, _) = small();
    exp.data.patch_size = 12;
    let err = prepare(&scene.cube, &exp).unwrap_err().to_string();
    assert!(err.contains("multiple of 8"), "{err}");
    let (mut exp, _) = small();
    exp.data.stride = 17;
    assert!(exp.validate().is_err());
}

#[test]
fn experiment_json_round_trips_and_fills_defaults() {
    let exp: Experiment = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
    assert_eq!(exp.train.epochs, 3);
    assert_eq!(exp.train.lr, 0.006);
    assert_eq!(exp.data, DataConfig::default());
    let text = serde_json::to_string(&exp).unwrap();
    assert_eq!(serde_json::from_str::<Experiment>(&text).unwrap(), exp);
}
