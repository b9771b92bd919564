//! Synthetic day-long load and PV profiles.
//!
//! Every bus carries a load with a two-peak daily shape; controllable buses also
//! host PV whose capacity scales with the inverter's reactive limit. Days differ
//! by a random load level and cloudiness, points within a day by small jitter.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::ReactiveBox;
use crate::error::{Error, Result};
use crate::grid::{GridNetwork, PowerScenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileConfig {
    pub days: usize,
    pub points_per_day: usize,
    pub seed: u64,
    /// Range of per-bus base load, MW.
    pub load_mw: [f64; 2],
    /// Load power factor (lagging).
    pub power_factor: f64,
    /// PV capacity as a multiple of the bus's reactive limit.
    pub pv_ratio: f64,
    /// Range of the per-day load multiplier.
    pub day_scale: [f64; 2],
    /// Range of the per-day clear-sky fraction.
    pub clearness: [f64; 2],
    /// Relative per-point jitter on load and PV.
    pub jitter: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            days: 6,
            points_per_day: 96,
            seed: 7,
            load_mw: [0.03, 0.14],
            power_factor: 0.95,
            pv_ratio: 0.25,
            day_scale: [0.8, 1.2],
            clearness: [0.45, 1.0],
            jitter: 0.03,
        }
    }
}

/// Load shape over the day, `h` in hours: overnight trough, morning and
/// evening peaks.
fn load_shape(h: f64) -> f64 {
    let bump = |c: f64, w: f64| (-((h - c) / w).powi(2)).exp();
    0.55 + 0.3 * bump(9.0, 2.5) + 0.45 * bump(18.5, 2.5)
}

fn pv_shape(h: f64) -> f64 {
    if (6.0..18.0).contains(&h) {
        (PI * (h - 6.0) / 12.0).sin().powf(1.3)
    } else {
        0.0
    }
}

/// One vector of scenarios per day.
pub fn synthetic_days(net: &GridNetwork, bx: &ReactiveBox, cfg: &ProfileConfig) -> Result<Vec<Vec<PowerScenario>>> {
    if cfg.points_per_day == 0 {
        return Err(Error::Config("points_per_day must be positive".into()));
    }
    if !(cfg.load_mw[0] >= 0.0 && cfg.load_mw[0] <= cfg.load_mw[1]) || !(cfg.power_factor > 0.0 && cfg.power_factor <= 1.0) {
        return Err(Error::Config("invalid load range or power factor".into()));
    }
    if bx.len() != net.controllable().len() {
        return Err(Error::Dimension("box does not match the controllable set".into()));
    }
    let n = net.n();
    let base = net.base_mva();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let load: Vec<f64> = (0..n).map(|_| rng.gen_range(cfg.load_mw[0]..=cfg.load_mw[1]) / base).collect();
    let mut pv = vec![0.0; n];
    for (k, &b) in net.controllable().iter().enumerate() {
        pv[b - 1] = cfg.pv_ratio * bx.q_max()[k].abs().max(bx.q_min()[k].abs());
    }
    let tan_phi = (1.0 - cfg.power_factor.powi(2)).sqrt() / cfg.power_factor;
    let unc = net.uncontrollable();
    let range = |r: [f64; 2], rng: &mut ChaCha8Rng| if r[0] < r[1] { rng.gen_range(r[0]..r[1]) } else { r[0] };

    let mut days = Vec::with_capacity(cfg.days);
    for d in 0..cfg.days {
        let scale = range(cfg.day_scale, &mut rng);
        let clear = range(cfg.clearness, &mut rng);
        let mut points = Vec::with_capacity(cfg.points_per_day);
        for t in 0..cfg.points_per_day {
            let h = 24.0 * t as f64 / cfg.points_per_day as f64;
            let ls = scale * load_shape(h);
            // passing clouds dim PV more on hazy days
            let cloud = 1.0 - (1.0 - clear) * rng.gen_range(0.0..1.0);
            let ps = pv_shape(h) * cloud;
            let mut p = DVector::zeros(n);
            let mut q_load = DVector::zeros(n);
            for i in 0..n {
                let jl = 1.0 + cfg.jitter * rng.gen_range(-1.0..1.0);
                let jp = 1.0 + cfg.jitter * rng.gen_range(-1.0..1.0);
                let l = load[i] * ls * jl;
                p[i] = pv[i] * ps * jp - l;
                q_load[i] = -l * tan_phi;
            }
            let q_u = DVector::from_iterator(unc.len(), unc.iter().map(|&b| q_load[b - 1]));
            points.push(PowerScenario::new(p, q_u, format!("d{d}t{t:02}")));
        }
        days.push(points);
    }
    Ok(days)
}
