//! Geometric multipath CSI simulator and the standard preprocessing chain.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};

use ndarray::{Array3, Axis};
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::encoders::{motion_cycles, motion_phase};
use super::latent::{Direction, LatentClip};
use crate::error::{Error, Result};
use crate::seed::{substream_seed, Rng};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;
const TX: (f64, f64) = (0.0, -2.5);
/// Receiver positions, deliberately not mirror-symmetric about x = 0.
pub const RX: [(f64, f64); 3] = [(-2.4, 0.6), (0.3, 2.6), (2.6, -0.4)];
const WALL_Y: f64 = 3.0;
const AMPLITUDE_SCALE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsiConfig {
    /// Packets per clip (T).
    pub packets: usize,
    /// Antennas per receiver (N_a).
    pub antennas: usize,
    /// Subcarriers before pruning.
    pub raw_subcarriers: usize,
    /// Pilot/guard indices removed after sanitization.
    pub pruned: Vec<usize>,
    /// Std of complex additive noise (amplitudes are of order one).
    pub noise: f64,
    /// How much more a limb shadows receivers on its own side.
    pub lateral_shadow: f64,
    pub wavelength_m: f64,
    pub subcarrier_spacing_hz: f64,
}

impl Default for CsiConfig {
    fn default() -> Self {
        Self {
            packets: 64,
            antennas: 3,
            raw_subcarriers: 56,
            pruned: vec![7, 21, 34, 48],
            noise: 0.05,
            lateral_shadow: 0.35,
            wavelength_m: 0.3,
            subcarrier_spacing_hz: 312.5e3,
        }
    }
}

impl CsiConfig {
    pub fn subcarriers(&self) -> usize {
        self.raw_subcarriers - self.pruned.iter().collect::<BTreeSet<_>>().len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.packets == 0 || self.antennas == 0 {
            return Err(Error::Config("packets and antennas must be positive".into()));
        }
        if self.raw_subcarriers < 2 {
            return Err(Error::Config("need at least two subcarriers".into()));
        }
        if let Some(&i) = self.pruned.iter().find(|&&i| i >= self.raw_subcarriers) {
            return Err(Error::Config(format!("pruned index {i} out of range")));
        }
        if self.subcarriers() < 2 {
            return Err(Error::Config("pruning leaves fewer than two subcarriers".into()));
        }
        if !(0.0..=0.5).contains(&self.lateral_shadow) {
            return Err(Error::Config("lateral_shadow must lie in [0, 0.5]".into()));
        }
        if !(self.noise >= 0.0) || !(self.wavelength_m > 0.0) || !(self.subcarrier_spacing_hz > 0.0) {
            return Err(Error::Config("noise, wavelength and spacing must be valid".into()));
        }
        Ok(())
    }
}

/// One receiver's view: amplitude and sanitized phase, `T × N_a × N_sc`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiTensor {
    pub receiver_id: usize,
    pub amplitude: Array3<f32>,
    pub phase: Array3<f32>,
}

impl CsiTensor {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.amplitude.dim()
    }
}

/// Wraps to `[-π, π]`.
pub fn wrap(x: f64) -> f64 {
    x - TAU * (x / TAU).round()
}

/// Removes `2π` jumps between neighbours, like `numpy.unwrap`.
pub fn unwrap(values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut correction = 0.0;
    for (i, &v) in values.iter().enumerate() {
        if i > 0 {
            let d = v - values[i - 1];
            let mut dd = (d + PI).rem_euclid(TAU) - PI;
            if dd == -PI && d > 0.0 {
                dd = PI;
            }
            if d.abs() >= PI {
                correction += dd - d;
            }
        }
        out.push(v + correction);
    }
    out
}

/// Per `(packet, antenna)` slice: unwrap along subcarriers, subtract the
/// least-squares line in subcarrier index, re-wrap.
pub fn sanitize_phase(raw: &Array3<f64>) -> Result<Array3<f64>> {
    let (_, _, k) = raw.dim();
    if k < 2 {
        return Err(Error::domain(format!("phase sanitization needs >= 2 subcarriers, got {k}")));
    }
    let n = k as f64;
    let x_mean = (n - 1.0) / 2.0;
    let sxx: f64 = (0..k).map(|i| (i as f64 - x_mean).powi(2)).sum();
    let mut out = raw.clone();
    for mut lane in out.lanes_mut(Axis(2)) {
        let un = unwrap(&lane.to_vec());
        let y_mean = un.iter().sum::<f64>() / n;
        let sxy: f64 = un
            .iter()
            .enumerate()
            .map(|(i, y)| (i as f64 - x_mean) * (y - y_mean))
            .sum();
        let slope = sxy / sxx;
        for (i, v) in lane.iter_mut().enumerate() {
            *v = wrap(un[i] - y_mean - slope * (i as f64 - x_mean));
        }
    }
    Ok(out)
}

fn keep_columns(len: usize, pruned: &[usize]) -> Result<Vec<usize>> {
    let set: BTreeSet<usize> = pruned.iter().copied().collect();
    if let Some(&i) = set.iter().find(|&&i| i >= len) {
        return Err(Error::domain(format!("subcarrier index {i} out of range 0..{len}")));
    }
    Ok((0..len).filter(|i| !set.contains(i)).collect())
}

/// Drops the listed subcarrier columns from a `T × N_a × N_sc` array.
pub fn prune_axis<T: Clone>(arr: &Array3<T>, pruned: &[usize]) -> Result<Array3<T>> {
    let keep = keep_columns(arr.len_of(Axis(2)), pruned)?;
    Ok(arr.select(Axis(2), &keep))
}

/// Removes the listed subcarriers from amplitude and phase alike.
pub fn prune_subcarriers(csi: &CsiTensor, pruned: &[usize]) -> Result<CsiTensor> {
    Ok(CsiTensor {
        receiver_id: csi.receiver_id,
        amplitude: prune_axis(&csi.amplitude, pruned)?,
        phase: prune_axis(&csi.phase, pruned)?,
    })
}

struct Path {
    gain: f64,
    length: f64,
    sin_aoa: f64,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Sine of the arrival angle from `from` measured off the array broadside,
/// where each array faces the room centre.
fn sin_aoa(rx: (f64, f64), from: (f64, f64)) -> f64 {
    let normal = (-rx.0, -rx.1);
    let nn = (normal.0.powi(2) + normal.1.powi(2)).sqrt();
    let axis = (-normal.1 / nn, normal.0 / nn);
    let v = (from.0 - rx.0, from.1 - rx.1);
    let vn = (v.0.powi(2) + v.1.powi(2)).sqrt();
    (v.0 * axis.0 + v.1 * axis.1) / vn
}

fn scatter_path(rx: (f64, f64), at: (f64, f64), reflectivity: f64) -> Path {
    let length = dist(TX, at) + dist(at, rx);
    Path {
        gain: reflectivity / length,
        length,
        sin_aoa: sin_aoa(rx, at),
    }
}

fn distance_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * ab.0 + (p.1 - a.1) * ab.1) / (ab.0.powi(2) + ab.1.powi(2))).clamp(0.0, 1.0);
    dist(p, (a.0 + t * ab.0, a.1 + t * ab.1))
}

/// Limb displacement from the torso at normalized time `t ∈ [0, 1)`.
fn limb_offset(class_id: usize, side: f64, reach: f64, phase0: f64, t: f64) -> (f64, f64) {
    let angle = TAU * ((class_id * 7) % 24) as f64 / 24.0;
    let m = (TAU * motion_cycles(class_id) * t + phase0).sin() * burst(class_id, t);
    (
        side * (0.25 + reach * angle.cos().abs() * m),
        0.1 + reach * angle.sin() * m,
    )
}

/// Half of the actions move continuously, the other half in a single burst.
fn burst(class_id: usize, t: f64) -> f64 {
    if (class_id / 4) % 2 == 1 {
        (PI * t).sin().powi(2)
    } else {
        1.0
    }
}

/// Fraction of the line-of-sight path occluded by the moving limbs, in [0, 1].
pub fn motion_envelope(class_id: usize, phase0: f64, t: f64) -> f64 {
    0.5 * (1.0 - (TAU * motion_cycles(class_id) * t + phase0).cos()) * burst(class_id, t)
}

/// How strongly receiver `r` sees the limb motion. A limb on one side of the
/// body occludes receivers on that side more.
pub fn shadow_depth(receiver_id: usize, direction: Direction, lateral_shadow: f64) -> f64 {
    let (x, y) = RX[receiver_id];
    let lateral = x / (x * x + y * y).sqrt();
    match direction {
        Direction::None => 0.7,
        d => 0.5 + lateral_shadow * d.sign() * lateral,
    }
}

/// Static per-receiver frequency response, distinct for every receiver.
fn receiver_ripple(receiver_id: usize, k: usize, n_k: usize) -> f64 {
    let r = receiver_id as f64;
    1.0 + 0.3 * (TAU * (1.0 + r) * k as f64 / n_k as f64 + 1.3 * r).sin()
}

fn paths_at(latent: &LatentClip, receiver_id: usize, reach: f64, phase0: f64, t: f64, cfg: &CsiConfig) -> Vec<Path> {
    let rx = RX[receiver_id];
    let body = latent.position_xy();
    let los_len = dist(TX, rx);
    let blocking = 0.2 * (-(distance_to_segment(body, TX, rx) / 0.5).powi(2)).exp();
    let motion = 0.8 * shadow_depth(receiver_id, latent.direction, cfg.lateral_shadow) * motion_envelope(latent.class_id, phase0, t);
    let image = (TX.0, 2.0 * WALL_Y - TX.1);
    let mut paths = vec![
        Path {
            gain: (1.0 - blocking - motion) / los_len,
            length: los_len,
            sin_aoa: sin_aoa(rx, TX),
        },
        Path {
            gain: 0.2 / dist(image, rx),
            length: dist(image, rx),
            sin_aoa: sin_aoa(rx, image),
        },
        scatter_path(rx, body, 0.15),
    ];
    let sides: &[f64] = match latent.direction {
        Direction::Left => &[-1.0],
        Direction::Right => &[1.0],
        Direction::None => &[-1.0, 1.0],
    };
    for &side in sides {
        let off = limb_offset(latent.class_id, side, reach, phase0, t);
        paths.push(scatter_path(rx, (body.0 + off.0, body.1 + off.1), 0.1));
    }
    paths
}

/// Unsanitized amplitude and wrapped raw phase over all raw subcarriers.
///
/// Raw phase carries random per-packet constant and slope offsets, like
/// uncalibrated hardware.
pub fn synth_raw_csi(
    latent: &LatentClip,
    receiver_id: usize,
    noise_level: f64,
    cfg: &CsiConfig,
) -> Result<(Array3<f64>, Array3<f64>)> {
    if receiver_id >= RX.len() {
        return Err(Error::domain(format!("receiver {receiver_id} out of range")));
    }
    let (t_len, n_a, n_k) = (cfg.packets, cfg.antennas, cfg.raw_subcarriers);
    let mut clip_rng = Rng::seed_from_u64(substream_seed(latent.seed, "limb-reach"));
    let reach = 0.25 * clip_rng.random_range(0.85..1.15);
    let phase0 = motion_phase(latent.seed);
    let stream = format!("csi/{receiver_id}/{}", latent.direction.as_str());
    let mut rng = Rng::seed_from_u64(substream_seed(latent.seed, &stream));
    let k_mid = (n_k as f64 - 1.0) / 2.0;

    let mut amp = Array3::<f64>::zeros((t_len, n_a, n_k));
    let mut pha = Array3::<f64>::zeros((t_len, n_a, n_k));
    for ti in 0..t_len {
        let t = ti as f64 / t_len as f64;
        let paths = paths_at(latent, receiver_id, reach, phase0, t, cfg);
        let offset_const: f64 = rng.random_range(-PI..PI);
        let offset_slope: f64 = rng.random_range(-0.2..0.2);
        for a in 0..n_a {
            for k in 0..n_k {
                let nu = (k as f64 - k_mid) * cfg.subcarrier_spacing_hz;
                let (mut re, mut im) = (0.0, 0.0);
                let gain = AMPLITUDE_SCALE * receiver_ripple(receiver_id, k, n_k);
                for p in &paths {
                    let phi = TAU * p.length / cfg.wavelength_m
                        + TAU * nu * p.length / SPEED_OF_LIGHT
                        + PI * a as f64 * p.sin_aoa;
                    re += gain * p.gain * phi.cos();
                    im -= gain * p.gain * phi.sin();
                }
                let nr: f64 = StandardNormal.sample(&mut rng);
                let ni: f64 = StandardNormal.sample(&mut rng);
                re += noise_level * nr / 2f64.sqrt();
                im += noise_level * ni / 2f64.sqrt();
                amp[[ti, a, k]] = (re * re + im * im).sqrt();
                pha[[ti, a, k]] = wrap(im.atan2(re) + offset_const + offset_slope * k as f64);
            }
        }
    }
    Ok((amp, pha))
}

/// Simulates one receiver view, sanitizes the phase, then prunes pilots.
pub fn synth_csi(latent: &LatentClip, receiver_id: usize, noise_level: f64, cfg: &CsiConfig) -> Result<CsiTensor> {
    cfg.validate()?;
    let (amp, raw_phase) = synth_raw_csi(latent, receiver_id, noise_level, cfg)?;
    let phase = sanitize_phase(&raw_phase)?;
    Ok(CsiTensor {
        receiver_id,
        amplitude: prune_axis(&amp, &cfg.pruned)?.mapv(|x| x as f32),
        phase: prune_axis(&phase, &cfg.pruned)?.mapv(|x| x as f32),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn latent(direction: Direction) -> LatentClip {
        LatentClip { class_id: 0, direction, position_index: 9, seed: 7 }
    }

    fn max_abs(a: &Array3<f64>) -> f64 {
        a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    #[test]
    fn linear_phase_sanitizes_to_zero() {
        let raw = Array3::from_shape_fn((2, 2, 30), |(t, a, k)| {
            wrap(0.3 + t as f64 - 0.7 * a as f64 + (1.1 + 0.2 * t as f64) * k as f64)
        });
        assert!(max_abs(&sanitize_phase(&raw).unwrap()) <= 1e-9);
    }

    #[test]
    fn sinusoid_survives_detrending() {
        let k = 40;
        let bump: Vec<f64> = (0..k).map(|i| 0.5 * (TAU * i as f64 / k as f64).sin()).collect();
        let raw = Array3::from_shape_fn((1, 1, k), |(_, _, i)| wrap(2.0 + 0.9 * i as f64 + bump[i]));
        let out = sanitize_phase(&raw).unwrap();
        let n = k as f64;
        let xm = (n - 1.0) / 2.0;
        let ym = bump.iter().sum::<f64>() / n;
        let slope = bump.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum::<f64>()
            / (0..k).map(|i| (i as f64 - xm).powi(2)).sum::<f64>();
        for i in 0..k {
            let expect = wrap(bump[i] - ym - slope * (i as f64 - xm));
            assert!((out[[0, 0, i]] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn sanitize_rejects_single_subcarrier() {
        assert!(sanitize_phase(&Array3::zeros((1, 1, 1))).is_err());
    }

    #[test]
    fn pruning_examples() {
        let arr = Array3::from_shape_fn((1, 1, 6), |(_, _, k)| k as f64);
        assert_eq!(prune_axis(&arr, &[]).unwrap(), arr);
        let p = prune_axis(&arr, &[0, 5]).unwrap();
        assert_eq!(p.iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(prune_axis(&arr, &[6]).is_err());
    }

    #[test]
    fn twins_and_receivers_differ_and_noise_free_is_deterministic() {
        let cfg = CsiConfig::default();
        let l = synth_csi(&latent(Direction::Left), 0, 0.0, &cfg).unwrap();
        let r = synth_csi(&latent(Direction::Right), 0, 0.0, &cfg).unwrap();
        let frob: f32 = (&l.amplitude - &r.amplitude).mapv(|x| x * x).sum().sqrt();
        assert!(frob > 0.0);
        let other = synth_csi(&latent(Direction::Left), 1, 0.0, &cfg).unwrap();
        assert_ne!(l.amplitude, other.amplitude);
        assert_eq!(l, synth_csi(&latent(Direction::Left), 0, 0.0, &cfg).unwrap());
        assert_eq!(l.dims(), (64, 3, 52));
        assert!(l.amplitude.iter().all(|&x| x >= 0.0));
        assert!(l.phase.iter().all(|&x| (x as f64).abs() <= PI + 1e-6));
    }

    #[test]
    fn sanitized_simulator_output_is_idempotent() {
        let cfg = CsiConfig::default();
        let (_, raw) = synth_raw_csi(&latent(Direction::Left), 2, cfg.noise, &cfg).unwrap();
        let once = sanitize_phase(&raw).unwrap();
        let twice = sanitize_phase(&once).unwrap();
        assert!(max_abs(&(&twice - &once)) <= 1e-9);
    }
}
