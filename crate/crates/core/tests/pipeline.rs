//! Synthetic data through preprocessing, fitting and forecasting.

use std::collections::BTreeMap;

use agecal_core::forecast::forecast_curve;
use agecal_core::gp::{fit, FitConfig};
use agecal_core::metrics::{evaluate_cell, mae, q_pairs};
use agecal_core::preprocess::PreprocessConfig;
use agecal_core::study::prepare_all;
use agecal_core::synth::{default_dataset, DatasetLayout, SynthConfig};

#[test]
fn noiseless_training_cells_are_reproduced() {
    let cfg = SynthConfig {
        noise_std: 0.0,
        ..SynthConfig::default()
    };
    let layout = DatasetLayout {
        cells_per_condition: 1,
        duration: 600.0,
        dynamic: false,
        ..DatasetLayout::default()
    };
    let data = default_dataset(&cfg, &layout).unwrap();
    let prepared = prepare_all(&data.cells, &data.profiles, &PreprocessConfig::default()).unwrap();
    let rows: Vec<_> = prepared.iter().flat_map(|c| c.rows.clone()).collect();
    let fit_cfg = FitConfig {
        restarts: 3,
        ..FitConfig::default()
    };
    let model = fit(&rows, &fit_cfg, &BTreeMap::new()).unwrap();

    for cell in &prepared {
        let eval = evaluate_cell(&model, cell, 30.0).unwrap();
        assert!(
            eval.q.unwrap().mae < 1e-3,
            "{}: {:?}",
            cell.cell_id(),
            eval.q
        );

        let fc = forecast_curve(&model, &cell.profile, 540.0, 30.0).unwrap();
        let pairs = q_pairs(&fc, &cell.linear_points());
        assert!(mae(&pairs).unwrap() < 1e-3);
    }
}
