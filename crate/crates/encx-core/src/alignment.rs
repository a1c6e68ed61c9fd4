//! Temporal alignment of irregularly-timed stimulus features to the TR grid,
//! delay embedding, and context-window planning for external extractors.

use crate::error::{EncxError, Result};
use ndarray::{Array2, ArrayView2};

/// Stimulus features sampled at irregular event times (tokens, audio frames).
#[derive(Debug, Clone)]
pub struct FeatureSeries {
    times: Vec<f64>,
    values: Array2<f64>,
}

impl FeatureSeries {
    /// Times must be finite, nonnegative, and nondecreasing, one per value row.
    pub fn new(times: Vec<f64>, values: Array2<f64>) -> Result<Self> {
        if times.len() != values.nrows() {
            return Err(EncxError::ShapeMismatch(format!(
                "{} times for {} value rows",
                times.len(),
                values.nrows()
            )));
        }
        for (i, &t) in times.iter().enumerate() {
            if !t.is_finite() || t < 0.0 {
                return Err(EncxError::InvalidArgument(format!(
                    "event time {i} is {t}; times must be finite and >= 0"
                )));
            }
            if i > 0 && t < times[i - 1] {
                return Err(EncxError::InvalidArgument(format!(
                    "event times decrease at index {i}: {} -> {t}",
                    times[i - 1]
                )));
            }
        }
        Ok(FeatureSeries { times, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Windowed-sinc kernel for a low-pass cutoff at `1/(2*tr)` Hz with `lobes`
/// side lobes: zero at every nonzero integer multiple of `tr`, one at zero
/// lag, and identically zero beyond `lobes*tr`.
fn lanczos_kernel(dt_seconds: f64, tr: f64, lobes: usize) -> f64 {
    let u = dt_seconds / tr;
    let a = lobes as f64;
    if u.abs() >= a {
        return 0.0;
    }
    if u == 0.0 {
        return 1.0;
    }
    let pu = std::f64::consts::PI * u;
    (pu.sin() / pu) * ((pu / a).sin() / (pu / a))
}

/// Resample an irregular [`FeatureSeries`] onto the TR grid `0, tr, 2*tr, ...`.
///
/// Row `n` is the kernel-weighted sum of events within `lobes*tr` of `n*tr`.
/// Weights are normalized to sum to one whenever any event falls inside the
/// window (so constant inputs reproduce exactly regardless of event density);
/// rows whose window holds no event are zero.
pub fn lanczos_resample(
    fs: &FeatureSeries,
    tr_seconds: f64,
    n_tr: usize,
    lobes: usize,
) -> Result<Array2<f64>> {
    if fs.is_empty() {
        return Err(EncxError::InvalidArgument(
            "lanczos_resample: empty feature series".into(),
        ));
    }
    if !(tr_seconds > 0.0) {
        return Err(EncxError::InvalidArgument(format!(
            "lanczos_resample: tr must be positive, got {tr_seconds}"
        )));
    }
    if n_tr < 1 || lobes < 1 {
        return Err(EncxError::InvalidArgument(format!(
            "lanczos_resample: n_tr ({n_tr}) and lobes ({lobes}) must be >= 1"
        )));
    }

    let times = fs.times();
    let values = fs.values();
    let dim = fs.dim();
    let radius = lobes as f64 * tr_seconds;
    let mut out = Array2::<f64>::zeros((n_tr, dim));

    // Events are sorted, so each output row touches one contiguous span.
    let mut lo = 0usize;
    for n in 0..n_tr {
        let center = n as f64 * tr_seconds;
        while lo < times.len() && times[lo] < center - radius {
            lo += 1;
        }
        let mut hi = lo;
        while hi < times.len() && times[hi] <= center + radius {
            hi += 1;
        }
        if lo == hi {
            continue; // no event in window: zero row
        }
        let mut wsum = 0.0;
        let mut acc = vec![0.0f64; dim];
        for e in lo..hi {
            let w = lanczos_kernel(center - times[e], tr_seconds, lobes);
            if w == 0.0 {
                continue;
            }
            wsum += w;
            for d in 0..dim {
                acc[d] += w * values[[e, d]];
            }
        }
        // Signed weights can cancel; treat a vanishing sum like an empty window.
        if wsum.abs() > 1e-10 {
            for d in 0..dim {
                out[[n, d]] = acc[d] / wsum;
            }
        }
    }
    Ok(out)
}

/// A TR-aligned matrix concatenated with itself at earlier timepoints.
#[derive(Debug, Clone)]
pub struct DelayEmbedded {
    pub n_tr: usize,
    pub dim: usize,
    pub delays_tr: Vec<usize>,
    /// n_tr x (delays * dim); column block b holds the input shifted by
    /// delays_tr[b] rows, zero-filled before the story start.
    pub data: Array2<f64>,
}

/// Concatenate copies of `x` delayed by each entry of `delays_tr` (in TRs).
///
/// Block `b` of output row `n` equals `x[n - delays_tr[b]]`, or zeros when
/// that index falls before the story start. Blocks are ordered by the given
/// delays, which must be nondecreasing-free-form but each >= 0 (0 keeps the
/// current TR).
pub fn delay_embed(x: &Array2<f64>, delays_tr: &[usize]) -> Result<DelayEmbedded> {
    if delays_tr.is_empty() {
        return Err(EncxError::InvalidArgument(
            "delay_embed: delays list is empty".into(),
        ));
    }
    let n_tr = x.nrows();
    let dim = x.ncols();
    let mut data = Array2::<f64>::zeros((n_tr, delays_tr.len() * dim));
    for (b, &delay) in delays_tr.iter().enumerate() {
        for n in 0..n_tr {
            if n < delay {
                continue;
            }
            let src = n - delay;
            for d in 0..dim {
                data[[n, b * dim + d]] = x[[src, d]];
            }
        }
    }
    Ok(DelayEmbedded {
        n_tr,
        dim,
        delays_tr: delays_tr.to_vec(),
        data,
    })
}

/// The delays used throughout: 2, 4, 6, 8 seconds prior at tr = 2 s.
pub const DEFAULT_DELAYS_TR: [usize; 4] = [1, 2, 3, 4];

/// One window of a token-indexed context plan. The extractor should run on
/// events `[context_start, last]` and keep outputs for `queries`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct DynamicWindow {
    pub context_start: usize,
    pub last: usize,
    pub queries: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct DynamicWindowPlan {
    pub max_len: usize,
    pub reset_len: usize,
    pub windows: Vec<DynamicWindow>,
}

/// Plan grow-then-reset context windows over `n_events` events.
///
/// The context grows one event at a time from each reset point. When the
/// active context would exceed `max_len` events, a new window starts whose
/// context is the trailing `reset_len` events before the query. Every event
/// is queried exactly once.
pub fn plan_dynamic_windows(
    n_events: usize,
    max_len: usize,
    reset_len: usize,
) -> Result<DynamicWindowPlan> {
    if reset_len == 0 || reset_len >= max_len {
        return Err(EncxError::InvalidArgument(format!(
            "plan_dynamic_windows requires 0 < reset_len < max_len, got {reset_len} / {max_len}"
        )));
    }
    let mut windows = Vec::new();
    if n_events == 0 {
        return Ok(DynamicWindowPlan {
            max_len,
            reset_len,
            windows,
        });
    }
    let mut start = 0usize;
    let mut queries: Vec<usize> = Vec::new();
    for i in 0..n_events {
        if i - start + 1 > max_len {
            windows.push(DynamicWindow {
                context_start: start,
                last: i - 1,
                queries: std::mem::take(&mut queries),
            });
            start = i - reset_len;
        }
        queries.push(i);
    }
    windows.push(DynamicWindow {
        context_start: start,
        last: n_events - 1,
        queries,
    });
    Ok(DynamicWindowPlan {
        max_len,
        reset_len,
        windows,
    })
}

/// One window of a fixed-size sliding plan over continuous time.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SlidingWindow {
    pub start_seconds: f64,
    pub end_seconds: f64,
    /// Step index; the query time is `end_seconds`.
    pub query_index: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SlidingWindowPlan {
    pub window_seconds: f64,
    pub stride_seconds: f64,
    pub windows: Vec<SlidingWindow>,
}

/// Plan windows `[max(0, t - window), t]` for `t = 0, stride, 2*stride, ...`
/// up to `total_seconds` inclusive: `floor(total/stride) + 1` windows.
pub fn plan_sliding_windows(
    total_seconds: f64,
    window_seconds: f64,
    stride_seconds: f64,
) -> Result<SlidingWindowPlan> {
    if !(window_seconds > 0.0) || !(stride_seconds > 0.0) {
        return Err(EncxError::InvalidArgument(format!(
            "plan_sliding_windows requires positive window and stride, got {window_seconds} / {stride_seconds}"
        )));
    }
    if !(total_seconds >= 0.0) {
        return Err(EncxError::InvalidArgument(format!(
            "plan_sliding_windows: total_seconds must be >= 0, got {total_seconds}"
        )));
    }
    // The epsilon keeps binary-fraction strides (0.1) from dropping the final
    // step when total/stride lands a hair under an integer.
    let steps = (total_seconds / stride_seconds + 1e-9).floor() as usize;
    let windows = (0..=steps)
        .map(|k| {
            let t = k as f64 * stride_seconds;
            SlidingWindow {
                start_seconds: (t - window_seconds).max(0.0),
                end_seconds: t,
                query_index: k,
            }
        })
        .collect();
    Ok(SlidingWindowPlan {
        window_seconds,
        stride_seconds,
        windows,
    })
}
