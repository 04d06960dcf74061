//! Identity-balanced batch sampling and frame selection.

use std::collections::{BTreeMap, VecDeque};

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::network::ModalClass;
use crate::scalar::Scalar;
use crate::synthdata::{Corpus, Split};
use crate::tensor::Tensor;

/// Training tracklets grouped by identity.
#[derive(Clone, Debug)]
pub struct TrainSet {
    /// Sorted identities; the class label of `identities[k]` is `k`.
    pub identities: Vec<u32>,
    pub rgb: Vec<Vec<usize>>,
    pub ir: Vec<Vec<usize>>,
}

impl TrainSet {
    /// Identities lacking either modality are dropped with a warning.
    pub fn from_corpus(corpus: &Corpus, min_frames: usize) -> Result<Self> {
        let mut by_id: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for i in corpus.indices(Split::Train, min_frames) {
            let t = &corpus.tracklets[i];
            let slot = by_id.entry(t.identity).or_default();
            match t.modality {
                ModalClass::Rgb => slot.0.push(i),
                _ => slot.1.push(i),
            }
        }
        let mut set = Self {
            identities: Vec::new(),
            rgb: Vec::new(),
            ir: Vec::new(),
        };
        for (id, (rgb, ir)) in by_id {
            if rgb.is_empty() || ir.is_empty() {
                warn!("identity {id} lacks a modality in the training split; skipped");
                continue;
            }
            set.identities.push(id);
            set.rgb.push(rgb);
            set.ir.push(ir);
        }
        if set.identities.len() < 2 {
            return Err(invalid("training split needs at least two identities with both modalities"));
        }
        Ok(set)
    }

    pub fn num_classes(&self) -> usize {
        self.identities.len()
    }
}

/// One batch: for each of the `P` identities, `K/2` RGB and `K/2` IR tracklets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    /// Class label of every RGB tracklet, in order.
    pub labels: Vec<usize>,
    pub rgb: Vec<usize>,
    pub ir: Vec<usize>,
}

/// Batches for one epoch.
///
/// IR tracklets are drawn without replacement from a shuffled queue: each
/// batch takes the first `P` identities in queue order that still have
/// `K/2` IR tracklets queued. RGB partners come from per-identity pools
/// that are reshuffled whenever they run dry. The epoch ends once fewer
/// than `P` identities can be served.
pub fn epoch_batches<R: Rng + ?Sized>(set: &TrainSet, p: usize, k: usize, rng: &mut R) -> Result<Vec<PkBatch>> {
    if p < 2 || k == 0 || !k.is_multiple_of(2) {
        return Err(invalid(format!("invalid batch shape P={p}, K={k}")));
    }
    let half = k / 2;
    let mut queue: Vec<(usize, usize)> = set
        .ir
        .iter()
        .enumerate()
        .flat_map(|(label, ts)| ts.iter().map(move |&t| (label, t)))
        .collect();
    queue.shuffle(rng);
    let mut queued = vec![0usize; set.num_classes()];
    for &(label, _) in &queue {
        queued[label] += 1;
    }
    let mut pools: Vec<VecDeque<usize>> = vec![VecDeque::new(); set.num_classes()];
    let mut batches = Vec::new();
    loop {
        let mut chosen: Vec<usize> = Vec::with_capacity(p);
        for &(label, _) in &queue {
            if chosen.len() == p {
                break;
            }
            if queued[label] >= half && !chosen.contains(&label) {
                chosen.push(label);
            }
        }
        if chosen.len() < p {
            break;
        }
        let mut taken: Vec<Vec<usize>> = vec![Vec::new(); p];
        queue.retain(|&(label, t)| match chosen.iter().position(|&c| c == label) {
            Some(slot) if taken[slot].len() < half => {
                taken[slot].push(t);
                false
            }
            _ => true,
        });
        let mut batch = PkBatch {
            labels: Vec::with_capacity(p * half),
            rgb: Vec::with_capacity(p * half),
            ir: Vec::with_capacity(p * half),
        };
        for (slot, &label) in chosen.iter().enumerate() {
            queued[label] -= half;
            batch.ir.extend(&taken[slot]);
            for _ in 0..half {
                if pools[label].is_empty() {
                    let mut fresh = set.rgb[label].clone();
                    fresh.shuffle(rng);
                    pools[label].extend(fresh);
                }
                batch.rgb.push(pools[label].pop_front().expect("pool refilled"));
                batch.labels.push(label);
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

fn chunk_len(len: usize, n: usize) -> Result<usize> {
    if n == 0 || !len.is_multiple_of(n) {
        return Err(invalid(format!("{n} frames do not divide a {len}-frame tracklet")));
    }
    Ok(len / n)
}

/// One random frame from each of `n` equal chunks, in temporal order.
pub fn chunk_frames<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let c = chunk_len(len, n)?;
    Ok((0..n).map(|k| k * c + rng.random_range(0..c)).collect())
}

/// The middle frame of each of `n` equal chunks.
pub fn eval_frames(len: usize, n: usize) -> Result<Vec<usize>> {
    let c = chunk_len(len, n)?;
    Ok((0..n).map(|k| k * c + c / 2).collect())
}

/// Interleaves `B` clips of `[n × 3 × H × W]` into time-major `[n·B × 3 × H × W]`.
pub fn time_major<S: Scalar>(clips: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = clips.first().ok_or_else(|| invalid("no clips to stack"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 4 || clips.iter().any(|c| c.shape() != shape.as_slice()) {
        return Err(invalid("clips must share one [n, 3, H, W] shape"));
    }
    let n = shape[0];
    let frame = shape[1] * shape[2] * shape[3];
    let mut data = Vec::with_capacity(n * clips.len() * frame);
    for t in 0..n {
        for c in clips {
            data.extend_from_slice(&c.data()[t * frame..(t + 1) * frame]);
        }
    }
    Tensor::new(vec![n * clips.len(), shape[1], shape[2], shape[3]], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::stream_rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(ids: usize, per: usize) -> TrainSet {
        TrainSet {
            identities: (0..ids as u32).map(|i| i * 10).collect(),
            rgb: (0..ids).map(|i| (0..per).map(|j| 1000 + i * per + j).collect()).collect(),
            ir: (0..ids).map(|i| (0..per).map(|j| 2000 + i * per + j).collect()).collect(),
        }
    }

    #[test]
    fn batches_are_balanced_and_ir_is_used_once() {
        let s = set(10, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = epoch_batches(&s, 4, 2, &mut rng).unwrap();
        assert!(!batches.is_empty());
        let mut seen = std::collections::HashSet::new();
        for b in &batches {
            assert_eq!(b.rgb.len(), 4);
            assert_eq!(b.ir.len(), 4);
            let mut labels = b.labels.clone();
            labels.dedup();
            assert_eq!(labels.len(), 4);
            for (j, &label) in b.labels.iter().enumerate() {
                assert_eq!((b.rgb[j] - 1000) / 4, label);
                assert_eq!((b.ir[j] - 2000) / 4, label);
                assert!(seen.insert(b.ir[j]));
            }
        }
        // 40 IR tracklets, 4 per batch; the tail is dropped only when fewer
        // than P identities remain.
        assert!(batches.len() >= 7 && batches.len() <= 10);
    }

    #[test]
    fn k4_takes_two_per_modality() {
        let s = set(6, 4);
        let batches = epoch_batches(&s, 3, 4, &mut stream_rng(1, 4, 1)).unwrap();
        for b in &batches {
            assert_eq!(b.labels.len(), 6);
            for pair in b.labels.chunks(2) {
                assert_eq!(pair[0], pair[1]);
            }
        }
        assert_eq!(batches, epoch_batches(&s, 3, 4, &mut stream_rng(1, 4, 1)).unwrap());
    }

    #[test]
    fn frame_selection() {
        assert_eq!(eval_frames(24, 6).unwrap(), vec![2, 6, 10, 14, 18, 22]);
        assert_eq!(eval_frames(24, 1).unwrap(), vec![12]);
        assert!(eval_frames(24, 5).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let f = chunk_frames(24, 6, &mut rng).unwrap();
            for (k, &i) in f.iter().enumerate() {
                assert!(i >= 4 * k && i < 4 * (k + 1));
            }
        }
    }

    #[test]
    fn chunk_sampler_edge_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(chunk_frames(24, 24, &mut rng).unwrap(), (0..24).collect::<Vec<_>>());
        for _ in 0..1000 {
            let f = chunk_frames(24, 6, &mut rng).unwrap();
            assert!(f.windows(2).all(|w| w[0] < w[1]));
            for (k, &i) in f.iter().enumerate() {
                assert!(4 * k <= i && i <= 4 * k + 3);
            }
        }
        assert!(chunk_frames(24, 7, &mut rng).is_err());
    }

    #[test]
    fn single_frame_draw_is_uniform() {
        let draws = 24_000;
        let mut counts = [0usize; 24];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..draws {
            counts[chunk_frames(24, 1, &mut rng).unwrap()[0]] += 1;
        }
        let p = 1.0 / 24.0;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for c in counts {
            assert!((c as f64 / draws as f64 - p).abs() <= 3.0 * sigma, "{counts:?}");
        }
        // 23 degrees of freedom; 49.7 is the 0.999 quantile
        let expected = draws as f64 * p;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 49.7, "chi2 {chi2}");
    }

    #[test]
    fn two_identities_both_appear() {
        let s = set(2, 1);
        let batches = epoch_batches(&s, 2, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batches.len(), 1);
        let mut labels = batches[0].labels.clone();
        labels.sort();
        assert_eq!(labels, vec![0, 1]);
    }

    #[test]
    fn time_major_layout() {
        let a = Tensor::<f64>::new(vec![2, 1, 1, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::new(vec![2, 1, 1, 1], vec![10.0, 20.0]).unwrap();
        let t = time_major(&[a, b]).unwrap();
        assert_eq!(t.shape(), &[4, 1, 1, 1]);
        assert_eq!(t.data(), &[1.0, 10.0, 2.0, 20.0]);
    }
}
