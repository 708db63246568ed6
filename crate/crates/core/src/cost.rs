//! Multiply-accumulate accounting and wall-time measurement for routed
//! versus dense attention.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{dense_attention_reference, vbra, AttentionParams, VbraConfig};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor};

/// One sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CostPoint {
    pub dims: [usize; 3],
    pub region: [usize; 3],
    pub k: usize,
    pub heads: usize,
    pub channels: usize,
}

/// Analytic counts, all in multiply-accumulates except `gather_moves`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttentionCost {
    pub tokens: u64,
    pub region_tokens: u64,
    pub regions: u64,
    pub dense_scores: u64,
    pub dense_aggregate: u64,
    pub coarse: u64,
    pub fine_scores: u64,
    pub fine_aggregate: u64,
    /// Element copies made when gathering K* and V*.
    pub gather_moves: u64,
}

impl AttentionCost {
    pub fn dense_total(&self) -> u64 {
        self.dense_scores + self.dense_aggregate
    }

    pub fn routed_total(&self) -> u64 {
        self.coarse + self.fine_scores + self.fine_aggregate
    }

    /// Key tokens touched per query: `k * S` routed, `T` dense.
    pub fn keys_per_query(&self) -> (u64, u64) {
        (self.fine_scores / (self.tokens * 2 * self.head_dim_sum()), self.tokens)
    }

    /// `heads * d_k`, recovered from the dense term.
    fn head_dim_sum(&self) -> u64 {
        self.dense_scores / (2 * self.tokens * self.tokens)
    }

    /// True when `fine_scores / dense_scores == k S / T` with no rounding.
    pub fn score_ratio_is_exact(&self, k: u64) -> bool {
        self.fine_scores * self.tokens == self.dense_scores * k * self.region_tokens
    }
}

impl CostPoint {
    pub fn config(&self) -> VbraConfig {
        VbraConfig::new(self.channels, self.heads, self.region, self.k)
    }

    pub fn cost(&self) -> Result<AttentionCost> {
        let cfg = self.config();
        let grid = cfg.validate(self.dims)?;
        let t = self.dims.iter().product::<usize>() as u64;
        let s = self.region.iter().product::<usize>() as u64;
        let r = grid.iter().product::<usize>() as u64;
        let (h, d, c, k) = (self.heads as u64, cfg.head_dim as u64, self.channels as u64, self.k as u64);
        Ok(AttentionCost {
            tokens: t,
            region_tokens: s,
            regions: r,
            dense_scores: h * 2 * t * t * d,
            dense_aggregate: t * t * c,
            coarse: r * r * c,
            fine_scores: h * 2 * t * (k * s) * d,
            fine_aggregate: t * (k * s) * c,
            gather_moves: 2 * r * (k * s) * c,
        })
    }
}

/// Median wall time in seconds of one routed and one dense attention forward
/// (projections included in both) over `repeats` runs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Timing {
    pub routed_median_s: f64,
    pub dense_median_s: f64,
    pub repeats: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn time_attention<T: Element>(point: &CostPoint, repeats: usize, seed: u64) -> Result<Timing> {
    if repeats == 0 {
        return Err(Error::invalid("time_attention", "repeats must be positive"));
    }
    let cfg = point.config();
    cfg.validate(point.dims)?;
    let [h, w, d] = point.dims;
    let c = point.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |shape: Vec<usize>, scale: f64| {
        Tensor::<T>::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-scale..scale)))
    };
    let x = rand(vec![h, w, d, c], 1.0)?;
    let ws: Vec<Tensor<T>> = (0..4)
        .map(|_| rand(vec![c, c], 1.0 / (c as f64).sqrt()))
        .collect::<Result<_>>()?;

    let setup = |tape: &mut Tape<T>| {
        let xv = tape.constant(x.clone());
        let p = AttentionParams {
            w_q: tape.constant(ws[0].clone()),
            w_k: tape.constant(ws[1].clone()),
            w_v: tape.constant(ws[2].clone()),
            w_o: tape.constant(ws[3].clone()),
        };
        (xv, p)
    };
    let mut routed = Vec::with_capacity(repeats);
    let mut dense = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut tape = Tape::new();
        let (xv, p) = setup(&mut tape);
        let start = Instant::now();
        vbra(&mut tape, xv, &p, &cfg)?;
        routed.push(start.elapsed().as_secs_f64());
        drop(tape);

        let mut tape = Tape::new();
        let (xv, p) = setup(&mut tape);
        let start = Instant::now();
        let flat = tape.reshape(xv, &[h * w * d, c])?;
        let q = tape.matmul(flat, p.w_q)?;
        let k = tape.matmul(flat, p.w_k)?;
        let v = tape.matmul(flat, p.w_v)?;
        dense_attention_reference(&mut tape, q, k, v, p.w_o, point.heads)?;
        dense.push(start.elapsed().as_secs_f64());
    }
    Ok(Timing {
        routed_median_s: median(routed),
        dense_median_s: median(dense),
        repeats,
    })
}

/// Cartesian sweep over volume size, region size and k.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sweep {
    pub dims: Vec<[usize; 3]>,
    pub regions: Vec<[usize; 3]>,
    pub ks: Vec<usize>,
    pub heads: usize,
    pub channels: usize,
    /// Timed runs per point; 0 skips timing.
    pub repeats: usize,
}

impl Default for Sweep {
    fn default() -> Self {
        Sweep {
            dims: vec![[8, 8, 8], [16, 16, 16]],
            regions: vec![[2, 2, 2], [4, 4, 4]],
            ks: vec![1, 2, 4],
            heads: 2,
            channels: 32,
            repeats: 5,
        }
    }
}

impl Sweep {
    pub fn points(&self) -> Vec<CostPoint> {
        let mut out = Vec::new();
        for &dims in &self.dims {
            for &region in &self.regions {
                for &k in &self.ks {
                    out.push(CostPoint { dims, region, k, heads: self.heads, channels: self.channels });
                }
            }
        }
        out
    }
}

/// The twelve points of the default [`Sweep`].
pub fn default_sweep() -> Vec<CostPoint> {
    Sweep::default().points()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BenchRecord {
    pub point: CostPoint,
    pub cost: AttentionCost,
    pub timing: Option<Timing>,
}

impl BenchRecord {
    /// Exact `fine_scores / dense_scores`.
    pub fn score_ratio(&self) -> f64 {
        self.cost.fine_scores as f64 / self.cost.dense_scores as f64
    }
}

/// Computes analytic counts for every point and, when `repeats > 0`, times
/// each point at 32-bit.
pub fn run_sweep(sweep: &Sweep, seed: u64) -> Result<Vec<BenchRecord>> {
    sweep
        .points()
        .into_iter()
        .map(|point| {
            let timing = if sweep.repeats > 0 { Some(time_attention::<f32>(&point, sweep.repeats, seed)?) } else { None };
            Ok(BenchRecord { point, cost: point.cost()?, timing })
        })
        .collect()
}

fn fmt_dims(d: [usize; 3]) -> String {
    format!("{}x{}x{}", d[0], d[1], d[2])
}

/// Aligned text table.
pub fn bench_table(records: &[BenchRecord]) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>10} {:>8} {:>3} {:>5} {:>14} {:>14} {:>10} {:>11} {:>11} {:>11} {:>8}",
        "dims", "region", "k", "heads", "dense MACs", "routed MACs", "score k*S/T", "keys/query", "dense ms", "routed ms", "speedup"
    );
    for r in records {
        let (routed_keys, dense_keys) = r.cost.keys_per_query();
        let (dense_ms, routed_ms, speedup) = match r.timing {
            Some(t) => (
                format!("{:.3}", t.dense_median_s * 1e3),
                format!("{:.3}", t.routed_median_s * 1e3),
                format!("{:.2}", t.dense_median_s / t.routed_median_s),
            ),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let _ = writeln!(
            s,
            "{:>10} {:>8} {:>3} {:>5} {:>14} {:>14} {:>10.5} {:>11} {:>11} {:>11} {:>8}",
            fmt_dims(r.point.dims),
            fmt_dims(r.point.region),
            r.point.k,
            r.point.heads,
            r.cost.dense_total(),
            r.cost.routed_total(),
            r.score_ratio(),
            format!("{routed_keys}/{dense_keys}"),
            dense_ms,
            routed_ms,
            speedup
        );
    }
    s
}

/// Tab-separated records, one per point. Timing columns are last.
pub fn bench_records(records: &[BenchRecord]) -> String {
    use std::fmt::Write as _;
    let mut s = String::from(
        "dims\tregion\tk\theads\tchannels\ttokens\tregions\tdense_scores\tdense_aggregate\tcoarse\tfine_scores\tfine_aggregate\tgather_moves\tdense_total\trouted_total\tscore_ratio\tdense_median_s\trouted_median_s\n",
    );
    for r in records {
        let c = &r.cost;
        let _ = write!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            fmt_dims(r.point.dims),
            fmt_dims(r.point.region),
            r.point.k,
            r.point.heads,
            r.point.channels,
            c.tokens,
            c.regions,
            c.dense_scores,
            c.dense_aggregate,
            c.coarse,
            c.fine_scores,
            c.fine_aggregate,
            c.gather_moves,
            c.dense_total(),
            c.routed_total(),
            r.score_ratio()
        );
        match r.timing {
            Some(t) => {
                let _ = writeln!(s, "\t{}\t{}", t.dense_median_s, t.routed_median_s);
            }
            None => s.push_str("\t\t\n"),
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(dims: [usize; 3], region: [usize; 3], k: usize) -> CostPoint {
        CostPoint { dims, region, k, heads: 2, channels: 32 }
    }

    #[test]
    fn whole_volume_region_costs_dense_plus_coarse() {
        let c = point([8, 8, 8], [8, 8, 8], 1).cost().unwrap();
        assert_eq!(c.routed_total(), c.dense_total() + 32);
    }

    #[test]
    fn sixteen_cubed_ratio_is_one_sixteenth() {
        let c = point([16, 16, 16], [4, 4, 4], 4).cost().unwrap();
        assert_eq!(c.keys_per_query(), (256, 4096));
        assert_eq!(c.fine_scores * 16, c.dense_scores);
        assert!(c.score_ratio_is_exact(4));
    }

    #[test]
    fn doubling_k_doubles_fine_terms() {
        let a = point([16, 16, 16], [4, 4, 4], 2).cost().unwrap();
        let b = point([16, 16, 16], [4, 4, 4], 4).cost().unwrap();
        assert_eq!(2 * a.fine_scores, b.fine_scores);
        assert_eq!(2 * a.fine_aggregate, b.fine_aggregate);
    }

    #[test]
    fn sweep_ratios_exact_and_routed_cheaper() {
        let sweep = default_sweep();
        assert_eq!(sweep.len(), 12);
        for p in sweep {
            let c = p.cost().unwrap();
            assert!(c.score_ratio_is_exact(p.k as u64), "{p:?}");
            if (p.k as u64) * c.region_tokens <= c.tokens {
                assert!(c.fine_scores + c.fine_aggregate <= c.dense_total());
            }
        }
    }

    #[test]
    fn timing_runs_on_a_small_volume() {
        let t = time_attention::<f32>(&point([4, 4, 4], [2, 2, 2], 2), 3, 1).unwrap();
        assert!(t.routed_median_s > 0.0 && t.dense_median_s > 0.0);
        assert_eq!(median(vec![3.0, 1.0, 2.0, 10.0]), 2.5);
    }

    #[test]
    fn bench_output_without_timing() {
        let sweep = Sweep { dims: vec![[8, 8, 8]], regions: vec![[4, 4, 4]], ks: vec![2], repeats: 0, ..Default::default() };
        let records = run_sweep(&sweep, 0).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].score_ratio(), 0.25);
        let table = bench_table(&records);
        assert_eq!(table.lines().count(), 2);
        assert!(table.contains("128/512"));
        let tsv = bench_records(&records);
        let row: Vec<&str> = tsv.lines().nth(1).unwrap().split('\t').collect();
        assert_eq!(row.len(), tsv.lines().next().unwrap().split('\t').count());
        assert_eq!(&row[..3], &["8x8x8", "4x4x4", "2"]);
    }
}
