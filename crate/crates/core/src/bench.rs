//! Forward-pass benchmark of full attention against split-window attention.
//!
//! For a behavior size `l` the full baseline attends over `l` rows. The
//! windowed path runs an SW-MHA layer over `l + 1` rows (CLS included), the
//! SW-MLP reduction, then W-MHA over the window tokens. Full cells whose
//! score storage would exceed the budget are refused before anything is
//! allocated.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{mha_blocked, sw_mha, w_mha, MhaParams, PositionalEncoding, SW_LABEL, W_LABEL};
use crate::blocks::SwMlp;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::derive;
use crate::scalar::Scalar;
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

pub const DEFAULT_BUDGET_BYTES: u64 = 4 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchGrid {
    /// Behavior sizes `l`.
    pub sizes: Vec<usize>,
    pub window: usize,
    pub stride: usize,
    /// Token width `η`.
    pub width: usize,
    pub n_heads: usize,
    /// Whether to run the full-attention baseline.
    pub baseline: bool,
    pub budget_bytes: u64,
    /// Timed forwards per cell, after one warm-up.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchGrid {
    fn default() -> Self {
        BenchGrid {
            sizes: vec![1024, 2048, 4096, 8192, 16384],
            window: 64,
            stride: 32,
            width: 32,
            n_heads: 8,
            baseline: true,
            budget_bytes: DEFAULT_BUDGET_BYTES,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mechanism {
    #[serde(rename = "full-mha")]
    FullMha,
    #[serde(rename = "sw/w-mha")]
    SwWMha,
}

impl Mechanism {
    pub fn label(self) -> &'static str {
        match self {
            Mechanism::FullMha => "full-mha",
            Mechanism::SwWMha => "sw/w-mha",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mechanism: Mechanism,
    pub behaviors: usize,
    pub tokens: usize,
    pub feasible: bool,
    /// Median wall time of one forward; `None` for refused cells.
    pub seconds: Option<f64>,
    /// Closed-form attention-score scalars of one forward.
    pub scores: u64,
    /// Score scalars of the split-window level alone (zero for full attention).
    pub sw_scores: u64,
    /// Score scalars actually recorded by the tape; zero for refused cells.
    pub recorded: u64,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub grid: BenchGrid,
    pub rows: Vec<BenchRow>,
    /// Log-log least-squares exponent of time in `l`, per mechanism.
    pub slopes: Vec<(Mechanism, Option<f64>)>,
}

/// Exponent `b` of the least-squares fit `log y = a + b log x`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

fn full_scores(grid: &BenchGrid, l: usize) -> u64 {
    (grid.n_heads * l * l) as u64
}

fn windowed_scores(grid: &BenchGrid, tokens: usize) -> (u64, u64) {
    let k = tokens.div_ceil(grid.stride);
    let sw = (k * grid.n_heads * grid.window * grid.window) as u64;
    (sw, sw + (grid.n_heads * k * k) as u64)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn time_forward(repeats: usize, mut f: impl FnMut() -> Result<u64>) -> Result<(f64, u64)> {
    let recorded = f()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok((median(times), recorded))
}

struct Windowed<T> {
    store: ParamStore<T>,
    sw: MhaParams,
    mlp: SwMlp,
    w: MhaParams,
}

impl<T: Scalar> Windowed<T> {
    fn new(grid: &BenchGrid) -> Result<Self> {
        let mut rng = derive(grid.seed, 7);
        let mut store = ParamStore::new();
        let sw = MhaParams::new(&mut store, "sw", grid.width, grid.n_heads, &mut rng)?;
        let mlp = SwMlp::new(&mut store, "mlp", grid.window, grid.width, 0.0, &mut rng);
        let w = MhaParams::new(&mut store, "w", 2 * grid.width, grid.n_heads, &mut rng)?;
        Ok(Windowed { store, sw, mlp, w })
    }

    fn forward(&self, grid: &BenchGrid, x: &Tensor<T>) -> Result<u64> {
        let mut tape = Tape::new(Mode::Eval, grid.seed);
        let xv = tape.constant(x.clone());
        let mask = vec![true; x.rows()];
        let (h, wmask) = sw_mha(
            &mut tape,
            &self.store,
            xv,
            &self.sw,
            grid.window,
            grid.stride,
            &mask,
            &PositionalEncoding::Ape,
        )?;
        let h = self.mlp.forward(&mut tape, &self.store, h)?;
        w_mha(&mut tape, &self.store, h, &self.w, &wmask, &PositionalEncoding::Ape)?;
        Ok(tape.scores().total_for(SW_LABEL) + tape.scores().total_for(W_LABEL))
    }
}

/// Runs every cell of the grid in `T` precision.
pub fn run_bench<T: Scalar>(grid: &BenchGrid) -> Result<BenchReport> {
    if grid.sizes.is_empty() {
        return Err(Error::invalid("benchmark grid has no sizes"));
    }
    if !grid.width.is_multiple_of(grid.n_heads) {
        return Err(Error::invalid(format!(
            "width {} not divisible by {} heads",
            grid.width, grid.n_heads
        )));
    }
    let bytes = T::DTYPE.size() as u64;
    let windowed = Windowed::<T>::new(grid)?;
    let mut full_store = ParamStore::<T>::new();
    let full = MhaParams::new(
        &mut full_store,
        "mha",
        grid.width,
        grid.n_heads,
        &mut derive(grid.seed, 8),
    )?;
    let mut rows = Vec::new();
    for &l in &grid.sizes {
        if l == 0 {
            return Err(Error::invalid("behavior size must be positive"));
        }
        let x = Tensor::<T>::randn(&[l + 1, grid.width], 1.0, &mut derive(grid.seed, l as u64));
        let (sw_scores, scores) = windowed_scores(grid, l + 1);
        let feasible = scores * bytes <= grid.budget_bytes;
        let (seconds, recorded) = if feasible {
            let (s, r) = time_forward(grid.repeats, || windowed.forward(grid, &x))?;
            (Some(s), r)
        } else {
            (None, 0)
        };
        rows.push(BenchRow {
            mechanism: Mechanism::SwWMha,
            behaviors: l,
            tokens: l + 1,
            feasible,
            seconds,
            scores,
            sw_scores,
            recorded,
            params: windowed.store.trainable_count(),
        });
        if !grid.baseline {
            continue;
        }
        let scores = full_scores(grid, l);
        let feasible = scores * bytes <= grid.budget_bytes;
        let (seconds, recorded) = if feasible {
            let xl = Tensor::from_vec(&[l, grid.width], x.data()[..l * grid.width].to_vec());
            let mask = vec![true; l];
            let (s, r) = time_forward(grid.repeats, || {
                let mut tape = Tape::new(Mode::Eval, grid.seed);
                let xv = tape.constant(xl.clone());
                mha_blocked(&mut tape, &full_store, xv, &full, &mask, &PositionalEncoding::Ape)?;
                Ok(tape.scores().total())
            })?;
            (Some(s), r)
        } else {
            log::info!("full attention at l = {l} would exceed the score budget");
            (None, 0)
        };
        rows.push(BenchRow {
            mechanism: Mechanism::FullMha,
            behaviors: l,
            tokens: l,
            feasible,
            seconds,
            scores,
            sw_scores: 0,
            recorded,
            params: full_store.trainable_count(),
        });
    }
    let slopes = [Mechanism::SwWMha, Mechanism::FullMha]
        .into_iter()
        .filter(|&m| grid.baseline || m == Mechanism::SwWMha)
        .map(|m| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.mechanism == m)
                .filter_map(|r| r.seconds.map(|s| (r.behaviors as f64, s)))
                .unzip();
            (m, fit_slope(&xs, &ys))
        })
        .collect();
    Ok(BenchReport {
        grid: grid.clone(),
        rows,
        slopes,
    })
}

impl BenchReport {
    pub fn any_feasible(&self) -> bool {
        self.rows.iter().any(|r| r.feasible)
    }

    pub fn slope(&self, m: Mechanism) -> Option<f64> {
        self.slopes.iter().find(|(k, _)| *k == m).and_then(|(_, s)| *s)
    }

    pub fn row(&self, m: Mechanism, behaviors: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mechanism == m && r.behaviors == behaviors)
    }

    /// Cell rows followed by one `slope` row per mechanism.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mechanism,behaviors,tokens,status,seconds,scores,sw_scores,recorded,params\n");
        for r in &self.rows {
            let status = if r.feasible { "ok" } else { "would exceed budget" };
            let secs = r.seconds.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(
                s,
                "{},{},{},{status},{secs},{},{},{},{}",
                r.mechanism.label(),
                r.behaviors,
                r.tokens,
                r.scores,
                r.sw_scores,
                r.recorded,
                r.params
            )
            .unwrap();
        }
        for (m, slope) in &self.slopes {
            let v = slope.map(|v| format!("{v:.4}")).unwrap_or_default();
            writeln!(s, "{},slope,,,{v},,,,", m.label()).unwrap();
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>8} {:>22} {:>12} {:>16} {:>10}\n",
            "mechanism", "l", "status", "seconds", "scores", "params"
        );
        for r in &self.rows {
            let status = if r.feasible { "ok" } else { "would exceed budget" };
            let secs = r.seconds.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            writeln!(
                s,
                "{:<10} {:>8} {:>22} {:>12} {:>16} {:>10}",
                r.mechanism.label(),
                r.behaviors,
                status,
                secs,
                r.scores,
                r.params
            )
            .unwrap();
        }
        for (m, slope) in &self.slopes {
            let v = slope.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
            writeln!(s, "slope {:<10} {v}", m.label()).unwrap();
        }
        s
    }
}
