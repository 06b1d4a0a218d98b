use pcam_core::classifier::{ClassifierConfig, ClassifierModel};
use pcam_core::metrics::{diffusion_study, DiffusionConfig, Distribution};
use pcam_core::shapes::{dataset_generate, DatasetConfig, ShapeFamily};

fn mean_norm(points: &[[f64; 3]]) -> f64 {
    points.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).sum::<f64>() / points.len() as f64
}

#[test]
fn origin_clouds_score_the_mean_norm_of_real_points() {
    let split = dataset_generate(&DatasetConfig {
        families: vec![ShapeFamily::Cube, ShapeFamily::Plane],
        train_per_class: 6,
        test_per_class: 2,
        points: 32,
        seed: 3,
        ..DatasetConfig::default()
    })
    .unwrap();
    let model = ClassifierModel::new(ClassifierConfig { shared: vec![8, 16], head: vec![8], classes: 2 }, 1).unwrap();
    let cfg = DiffusionConfig { steps: 3, n_per_step: 3, emd: false, seed: 9, ..DiffusionConfig::default() };
    let table = diffusion_study(&model, &split, &cfg).unwrap();
    assert_eq!(table.rows.len(), 6);

    for dist in [Distribution::Uniform, Distribution::Gaussian] {
        let row = table.of(dist).next().unwrap();
        assert_eq!(row.parameter, 0.0);
        let norms: Vec<f64> = split
            .train_of_class(row.class)
            .chain(split.test_of_class(row.class))
            .map(|c| mean_norm(c.cloud.points()))
            .collect();
        let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = norms.iter().copied().fold(0.0, f64::max);
        assert!(row.cd > 0.0 && row.cd >= lo - 1e-12 && row.cd <= hi + 1e-12, "{} not in [{lo}, {hi}]", row.cd);
        assert!(row.emd.is_none());
    }
}
