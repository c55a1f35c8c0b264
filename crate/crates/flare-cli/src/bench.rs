//! Wall-clock measurement of the bare mixer and the slope fit used to read
//! off its scaling exponent.
//!
//! Each point times forward plus backward of one mixer call on random
//! single-precision inputs: one untimed warm-up, then `reps` timed runs,
//! reported as mean and standard deviation. Timing runs inside a caller
//! supplied thread pool; the acceptance setting is one thread so the
//! exponent is not polluted by fork overhead.

use flare_core::autodiff::Tape;
use flare_core::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Which token-mixing operator to measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixerKind {
    /// Latent-bottleneck mixing, linear in token count.
    Flare,
    /// Quadratic softmax self-attention.
    Vanilla,
}

impl MixerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "flare" => Ok(MixerKind::Flare),
            "vanilla" => Ok(MixerKind::Vanilla),
            other => Err(Error::InvalidConfig(format!(
                "mixer must be \"flare\" or \"vanilla\", got {other:?}"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Flare => "flare",
            MixerKind::Vanilla => "vanilla",
        }
    }
}

/// One measured row of the bench CSV.
#[derive(Debug, Clone)]
pub struct BenchPoint {
    pub n: usize,
    pub mixer: &'static str,
    pub m: usize,
    pub seconds_mean: f64,
    pub seconds_std: f64,
}

/// Times forward+backward of one mixer call at token count `n`.
pub fn time_mixer(
    kind: MixerKind,
    n: usize,
    m: usize,
    channels: usize,
    heads: usize,
    reps: usize,
    seed: u64,
) -> Result<BenchPoint> {
    if reps == 0 {
        return Err(Error::InvalidConfig("reps must be >= 1".into()));
    }
    if heads == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::InvalidConfig(format!(
            "channels {channels} not divisible by heads {heads}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |rows: usize| -> Tensor<f32> {
        Tensor::new(
            &[rows, channels],
            (0..rows * channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    };
    let q = fill(if kind == MixerKind::Flare { m } else { n });
    let k = fill(n);
    let v = fill(n);
    let scale = 1.0 / ((channels / heads) as f32).sqrt();

    let one_pass = || -> Result<()> {
        let mut tape = Tape::<f32>::new();
        let qv = tape.leaf(q.clone());
        let kv = tape.leaf(k.clone());
        let vv = tape.leaf(v.clone());
        let y = match kind {
            MixerKind::Flare => tape.latent_mix(qv, kv, vv, heads)?,
            MixerKind::Vanilla => tape.attention(qv, kv, vv, heads, scale)?,
        };
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss)?;
        std::hint::black_box(grads.get(qv));
        Ok(())
    };

    one_pass()?; // warm start: page in buffers, settle the allocator
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        one_pass()?;
        times.push(t0.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / reps as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / reps as f64;
    Ok(BenchPoint {
        n,
        mixer: kind.name(),
        m,
        seconds_mean: mean,
        seconds_std: var.sqrt(),
    })
}

/// Least-squares slope of log(y) against log(x). Two or more points, all
/// strictly positive.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidConfig("slope fit needs at least two points".into()));
    }
    if points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return Err(Error::invalid_value("loglog_slope", "nonpositive coordinate"));
    }
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return Err(Error::invalid_value("loglog_slope", "degenerate abscissae"));
    }
    Ok((n * sxy - sx * sy) / denom)
}

/// CSV rendering with the fixed header `n,mixer,m,seconds_mean,seconds_std`.
pub fn render_csv(points: &[BenchPoint]) -> String {
    let mut out = String::from("n,mixer,m,seconds_mean,seconds_std\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{:.9},{:.9}\n",
            p.n, p.mixer, p.m, p.seconds_mean, p.seconds_std
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_recovers_exact_power_laws() {
        let lin: Vec<(f64, f64)> = (1..=6).map(|i| (i as f64 * 100.0, i as f64 * 0.3)).collect();
        assert!((loglog_slope(&lin).unwrap() - 1.0).abs() < 1e-12);
        let quad: Vec<(f64, f64)> =
            (1..=6).map(|i| (i as f64, (i * i) as f64 * 7.0)).collect();
        assert!((loglog_slope(&quad).unwrap() - 2.0).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = (1..=4).map(|i| (i as f64, 5.0)).collect();
        assert!(loglog_slope(&flat).unwrap().abs() < 1e-12);
    }

    #[test]
    fn slope_rejects_degenerate_inputs() {
        assert!(loglog_slope(&[(1.0, 1.0)]).is_err());
        assert!(loglog_slope(&[(1.0, 0.0), (2.0, 1.0)]).is_err());
        assert!(loglog_slope(&[(3.0, 1.0), (3.0, 2.0)]).is_err());
    }

    #[test]
    fn timing_points_carry_the_requested_labels() {
        let p = time_mixer(MixerKind::Flare, 64, 8, 16, 2, 2, 0).unwrap();
        assert_eq!((p.n, p.mixer, p.m), (64, "flare", 8));
        assert!(p.seconds_mean > 0.0);
        assert!(p.seconds_std >= 0.0);
        let q = time_mixer(MixerKind::Vanilla, 64, 8, 16, 2, 2, 0).unwrap();
        assert_eq!(q.mixer, "vanilla");
        assert!(time_mixer(MixerKind::Flare, 64, 8, 15, 2, 2, 0).is_err());
        assert!(MixerKind::parse("linear").is_err());
    }

    #[test]
    fn csv_has_header_and_one_row_per_point() {
        let pts = vec![
            BenchPoint { n: 10, mixer: "flare", m: 4, seconds_mean: 0.5, seconds_std: 0.1 },
            BenchPoint { n: 20, mixer: "flare", m: 4, seconds_mean: 1.0, seconds_std: 0.2 },
        ];
        let csv = render_csv(&pts);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "n,mixer,m,seconds_mean,seconds_std");
        assert!(lines[1].starts_with("10,flare,4,"));
    }
}
