//! Browser front end for `fedsilo`. Each export runs a small simulation and
//! returns JSON for the page in `www/` to draw.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use fedsilo::config::{ExperimentConfig, Seeds};
use fedsilo::data::generate;
use fedsilo::fv::{argmax_lowest, grid_search};
use fedsilo::params::ParamVec;
use fedsilo::{sim, Method};

/// Small enough to finish in a browser tab in a few seconds.
pub fn demo_config(method: Method, rounds: usize, local_steps: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        method,
        ..ExperimentConfig::default()
    };
    cfg.seeds = Seeds::from_master(seed);
    cfg.hyper_params.rounds = rounds;
    cfg.hyper_params.local_steps = local_steps;
    cfg.eval_every = rounds.max(1);
    cfg.partition_plan.samples_per_class = 60;
    cfg.partition_plan.val_samples_per_class = 20;
    cfg.partition_plan.eval_samples_per_class = 20;
    cfg
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub method: &'static str,
    /// Smoothed loss per round, one inner vector per party.
    pub losses: Vec<Vec<f64>>,
}

fn per_party(out: &sim::RunOutput) -> Vec<Vec<f64>> {
    let parties = out.metrics.first().map_or(0, |m| m.losses.len());
    (0..parties)
        .map(|p| out.metrics.iter().map(|m| m.losses[p]).collect())
        .collect()
}

/// Smoothed training losses of fedavg, pfm and centralized on the same data.
pub fn drift_curves(rounds: usize, local_steps: usize, seed: u64) -> Result<Vec<Curve>, String> {
    let base = demo_config(Method::Centralized, rounds, local_steps, seed);
    base.validate().map_err(|e| e.to_string())?;
    let data = generate(&base.plan()).map_err(|e| e.to_string())?;
    [Method::Fedavg, Method::Pfm, Method::Centralized]
        .into_iter()
        .map(|method| {
            let cfg = ExperimentConfig { method, ..base.clone() };
            let out = sim::run_with_observer(&cfg, &data, |_| {}).map_err(|e| e.to_string())?;
            Ok(Curve {
                method: method.name(),
                losses: per_party(&out),
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct Trajectory {
    /// Aggregation weighting per round.
    pub weightings: Vec<Vec<f64>>,
    /// Raw validator scores of the chosen candidate, per applied FV round.
    pub scores: Vec<Vec<f64>>,
}

/// Aggregation weights of a pfm_fv run, round by round.
pub fn fv_trajectory(rounds: usize, smooth_rate: f64, candidates: usize, seed: u64) -> Result<Trajectory, String> {
    let mut cfg = demo_config(Method::PfmFv, rounds, 10, seed);
    cfg.fv_params.smooth_rate = smooth_rate;
    cfg.fv_params.candidates = candidates;
    cfg.validate().map_err(|e| e.to_string())?;
    let out = sim::run(&cfg).map_err(|e| e.to_string())?;
    let scores = out
        .fv_trace
        .iter()
        .filter_map(|row| row.record.as_ref())
        .map(|r| (0..r.raw.validators()).map(|v| r.raw.get(v, r.chosen)).collect())
        .collect();
    Ok(Trajectory {
        weightings: out.metrics.iter().map(|m| m.weighting.clone()).collect(),
        scores,
    })
}

#[derive(Debug, Serialize)]
pub struct Surface {
    pub resolution: usize,
    /// `[w0, w1, w2, total]` per lattice point.
    pub points: Vec<[f64; 4]>,
    pub best: usize,
}

/// Summed validator score over the weighting simplex, for the local
/// backbones at the end of a short pfm run.
pub fn grid_surface(rounds: usize, resolution: usize, seed: u64) -> Result<Surface, String> {
    let cfg = demo_config(Method::Pfm, rounds, 10, seed);
    cfg.validate().map_err(|e| e.to_string())?;
    let data = generate(&cfg.plan()).map_err(|e| e.to_string())?;
    let out = sim::run_with_observer(&cfg, &data, |_| {}).map_err(|e| e.to_string())?;
    let snapshot: Vec<ParamVec> = out.checkpoint.trainers.iter().map(|t| t.theta.clone()).collect();
    let validators = sim::build_validators(&cfg, &data).map_err(|e| e.to_string())?;
    let grid = grid_search(&snapshot, &validators, resolution).map_err(|e| e.to_string())?;
    let points: Vec<[f64; 4]> = grid
        .iter()
        .map(|g| {
            let w = g.weighting.as_slice();
            [w[0], w[1], w[2], g.total()]
        })
        .collect();
    let best = argmax_lowest(points.iter().map(|p| p[3]));
    Ok(Surface {
        resolution,
        points,
        best,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = driftCurves)]
pub fn drift_curves_js(rounds: usize, local_steps: usize, seed: u64) -> Result<String, JsError> {
    to_js(drift_curves(rounds, local_steps, seed))
}

#[wasm_bindgen(js_name = fvTrajectory)]
pub fn fv_trajectory_js(rounds: usize, smooth_rate: f64, candidates: usize, seed: u64) -> Result<String, JsError> {
    to_js(fv_trajectory(rounds, smooth_rate, candidates, seed))
}

#[wasm_bindgen(js_name = gridSurface)]
pub fn grid_surface_js(rounds: usize, resolution: usize, seed: u64) -> Result<String, JsError> {
    to_js(grid_surface(rounds, resolution, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_cover_every_round_and_party() {
        let curves = drift_curves(6, 3, 1).unwrap();
        let names: Vec<_> = curves.iter().map(|c| c.method).collect();
        assert_eq!(names, ["fedavg", "pfm", "centralized"]);
        for c in &curves {
            assert_eq!(c.losses.len(), 3);
            assert!(c.losses.iter().all(|l| l.len() == 6 && l.iter().all(|x| x.is_finite())));
        }
    }

    #[test]
    fn trajectory_stays_on_the_simplex() {
        let t = fv_trajectory(5, 0.2, 3, 2).unwrap();
        assert_eq!(t.weightings.len(), 5);
        for w in &t.weightings {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(!t.scores.is_empty());
    }

    #[test]
    fn bad_inputs_report_the_field() {
        let err = fv_trajectory(5, 0.0, 3, 2).unwrap_err();
        assert!(err.contains("smooth_rate"), "{err}");
        assert!(grid_surface(2, 1, 0).is_err());
    }

    #[test]
    fn surface_has_one_point_per_lattice_node() {
        let s = grid_surface(3, 4, 3).unwrap();
        assert_eq!(s.points.len(), 15);
        let best = s.points[s.best][3];
        assert!(s.points.iter().all(|p| p[3] <= best));
    }
}
