use serde::{Deserialize, Serialize};

use super::metrics::{auc, SequenceMetrics, MAX_PRECISION_THRESHOLD, SUCCESS_POINTS};
use crate::bbox::BBox;
use crate::data::Sequence;
use crate::error::Error;
use crate::tracking::Tracker;

/// Anything that turns a sequence into per-frame boxes, starting from the
/// first ground-truth box.
pub trait SequenceTracker: Sync {
    /// Boxes for a prefix of the frames; when tracking stops early the
    /// error says why and the remaining frames count as failures.
    fn track(&self, seq: &Sequence) -> (Vec<BBox>, Option<Error>);
}

impl SequenceTracker for Tracker<'_> {
    fn track(&self, seq: &Sequence) -> (Vec<BBox>, Option<Error>) {
        self.run_partial(seq)
    }
}

/// Reports the ground truth itself.
pub struct OracleTracker;

impl SequenceTracker for OracleTracker {
    fn track(&self, seq: &Sequence) -> (Vec<BBox>, Option<Error>) {
        (seq.groundtruth.clone(), None)
    }
}

/// Never moves from the first box.
pub struct StaticTracker;

impl SequenceTracker for StaticTracker {
    fn track(&self, seq: &Sequence) -> (Vec<BBox>, Option<Error>) {
        (seq.groundtruth.first().map(|b| vec![*b; seq.len()]).unwrap_or_default(), None)
    }
}

/// One-pass evaluation over a suite. Curves are per-sequence averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpeResult {
    pub sequences: Vec<SequenceMetrics>,
    pub precision: Vec<f64>,
    pub success: Vec<f64>,
    pub precision_at_20: f64,
    pub auc: f64,
    pub total_frames: usize,
    pub failed_frames: usize,
}

impl OpeResult {
    pub fn from_sequences(sequences: Vec<SequenceMetrics>) -> OpeResult {
        let n = sequences.len().max(1) as f64;
        let mut precision = vec![0.0; MAX_PRECISION_THRESHOLD + 1];
        let mut success = vec![0.0; SUCCESS_POINTS];
        for s in &sequences {
            precision.iter_mut().zip(&s.precision).for_each(|(a, b)| *a += b / n);
            success.iter_mut().zip(&s.success).for_each(|(a, b)| *a += b / n);
        }
        // Sums of fractions can drift past 1 by an ulp.
        precision.iter_mut().chain(success.iter_mut()).for_each(|v| *v = v.min(1.0));
        OpeResult {
            precision_at_20: precision[20],
            auc: auc(&success),
            total_frames: sequences.iter().map(SequenceMetrics::frames).sum(),
            failed_frames: sequences.iter().map(|s| s.failed_frames).sum(),
            precision,
            success,
            sequences,
        }
    }

    /// The same aggregation over sequences whose attributes include `attr`.
    pub fn subset(&self, attr: &str) -> OpeResult {
        OpeResult::from_sequences(
            self.sequences
                .iter()
                .filter(|s| s.attributes.iter().any(|a| a == attr))
                .cloned()
                .collect(),
        )
    }
}

/// Runs `f` over `items` on up to `workers` threads; output order follows
/// input order.
pub fn parallel_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                scope.spawn(move || c.iter().map(f).collect::<Vec<U>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

/// Tracks every sequence from its first ground-truth box and scores it.
pub fn run_ope(tracker: &dyn SequenceTracker, sequences: &[Sequence], workers: usize) -> OpeResult {
    let metrics = parallel_map(sequences, workers, |seq| {
        let (boxes, err) = tracker.track(seq);
        if let Some(e) = err {
            log::warn!("{}: tracking stopped after {} frames: {e}", seq.name, boxes.len());
        }
        SequenceMetrics::new(&seq.name, &seq.attributes, &boxes, &seq.groundtruth)
    });
    OpeResult::from_sequences(metrics)
}
