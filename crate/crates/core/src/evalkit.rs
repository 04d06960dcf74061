//! Cross-modal retrieval evaluation: cosine ranking, CMC and mAP.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CMC_RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// IR queries against the visible gallery.
    IrToVis,
    VisToIr,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::IrToVis, Direction::VisToIr];

    pub fn name(self) -> &'static str {
        match self {
            Self::IrToVis => "ir_to_vis",
            Self::VisToIr => "vis_to_ir",
        }
    }
}

/// Identity and camera of a query or gallery entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Label {
    pub identity: u32,
    pub camera: u8,
}

/// Cosine similarities `[Nq × Ng]`; zero-norm rows score 0 against everything.
pub fn similarity_matrix<S: Scalar>(queries: &Tensor<S>, gallery: &Tensor<S>) -> Result<Tensor<S>> {
    if queries.rank() != 2 || gallery.rank() != 2 || queries.shape()[1] != gallery.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "similarity_matrix",
            lhs: queries.shape().to_vec(),
            rhs: gallery.shape().to_vec(),
        });
    }
    let (nq, ng) = (queries.shape()[0], gallery.shape()[0]);
    let norms = |t: &Tensor<S>, n: usize| -> Vec<S> { (0..n).map(|i| t.row(i).iter().map(|&v| v * v).sum::<S>().sqrt()).collect() };
    let (qn, gn) = (norms(queries, nq), norms(gallery, ng));
    let mut out = Vec::with_capacity(nq * ng);
    for i in 0..nq {
        let q = queries.row(i);
        for j in 0..ng {
            let denom = qn[i] * gn[j];
            out.push(if denom == S::zero() {
                S::zero()
            } else {
                q.iter().zip(gallery.row(j)).map(|(&a, &b)| a * b).sum::<S>() / denom
            });
        }
    }
    Tensor::new(vec![nq, ng], out)
}

/// Ranking result of one query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryOutcome {
    pub ap: f64,
    /// 1-based rank of the first correct match.
    pub first_hit: usize,
}

/// Scores one query: entries sharing the query's identity and camera are
/// dropped, the rest ranked by descending similarity (ties by gallery
/// index). Each relevant entry's rank is counted directly as one plus the
/// number of valid entries ordered before it. `None` when nothing relevant
/// remains.
pub fn score_query<S: Scalar>(sims: &[S], query: Label, gallery: &[Label]) -> Option<QueryOutcome> {
    let valid = |j: usize| !(gallery[j].identity == query.identity && gallery[j].camera == query.camera);
    let before = |k: usize, j: usize| {
        let (a, b) = (sims[k].as_f64(), sims[j].as_f64());
        a > b || (a == b && k < j)
    };
    let relevant: Vec<usize> = (0..gallery.len())
        .filter(|&j| valid(j) && gallery[j].identity == query.identity)
        .collect();
    if relevant.is_empty() {
        return None;
    }
    let mut ap = 0.0;
    let mut first_hit = usize::MAX;
    for &j in &relevant {
        let rank = 1 + (0..gallery.len()).filter(|&k| valid(k) && before(k, j)).count();
        let hits = 1 + relevant.iter().filter(|&&k| before(k, j)).count();
        ap += hits as f64 / rank as f64;
        first_hit = first_hit.min(rank);
    }
    Some(QueryOutcome {
        ap: ap / relevant.len() as f64,
        first_hit,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub direction: Direction,
    /// CMC at [`CMC_RANKS`].
    pub cmc: [f64; 4],
    pub map: f64,
    pub num_queries: usize,
    /// Queries dropped for lacking a valid relevant gallery entry.
    pub excluded: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }

    pub const CSV_HEADER: &'static str = "direction,r1,r5,r10,r20,map,num_queries";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.direction.name(),
            self.cmc[0],
            self.cmc[1],
            self.cmc[2],
            self.cmc[3],
            self.map,
            self.num_queries
        )
    }
}

/// Evaluates every query against the gallery.
pub fn evaluate<S: Scalar>(
    queries: &Tensor<S>,
    query_labels: &[Label],
    gallery: &Tensor<S>,
    gallery_labels: &[Label],
    direction: Direction,
) -> Result<EvalReport> {
    if queries.shape()[0] != query_labels.len() || gallery.shape()[0] != gallery_labels.len() {
        return Err(invalid("label count does not match feature rows"));
    }
    let sims = similarity_matrix(queries, gallery)?;
    let mut cmc = [0usize; 4];
    let (mut ap_sum, mut counted, mut excluded) = (0.0, 0, 0);
    for (i, &q) in query_labels.iter().enumerate() {
        match score_query(sims.row(i), q, gallery_labels) {
            Some(o) => {
                counted += 1;
                ap_sum += o.ap;
                for (c, &r) in cmc.iter_mut().zip(&CMC_RANKS) {
                    *c += (o.first_hit <= r) as usize;
                }
            }
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} {} queries have no valid match and were excluded", direction.name());
    }
    let frac = |v: usize| if counted == 0 { 0.0 } else { v as f64 / counted as f64 };
    Ok(EvalReport {
        direction,
        cmc: cmc.map(frac),
        map: if counted == 0 { 0.0 } else { ap_sum / counted as f64 },
        num_queries: counted,
        excluded,
    })
}

/// One query against a gallery, for the brute-force oracle.
#[derive(Clone, Debug)]
pub struct RankingInstance {
    pub query: (Label, Vec<f64>),
    pub gallery: Vec<(Label, Vec<f64>)>,
}

/// AP and first-hit rank by full sort and linear scan; `None` when no
/// valid relevant entry exists.
pub fn brute_force_oracle(inst: &RankingInstance) -> Option<QueryOutcome> {
    let (ql, qv) = &inst.query;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, usize, bool)> = Vec::new();
    for (j, (gl, gv)) in inst.gallery.iter().enumerate() {
        if gl.identity == ql.identity && gl.camera == ql.camera {
            continue;
        }
        let denom = norm(qv) * norm(gv);
        let sim = if denom == 0.0 {
            0.0
        } else {
            qv.iter().zip(gv).map(|(a, b)| a * b).sum::<f64>() / denom
        };
        scored.push((sim, j, gl.identity == ql.identity));
    }
    // `partial_cmp` so that 0.0 and -0.0 tie.
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite similarity").then(a.1.cmp(&b.1)));
    let (mut hits, mut precision_sum, mut first) = (0usize, 0.0, None);
    for (pos, &(_, _, relevant)) in scored.iter().enumerate() {
        if relevant {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first.get_or_insert(pos + 1);
        }
    }
    first.map(|first_hit| QueryOutcome {
        ap: precision_sum / hits as f64,
        first_hit,
    })
}

pub fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut out = String::from(EvalReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Plain-text table of reports, percentages with two decimals.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8}", "direction", "R1", "R5", "R10", "R20", "mAP", "queries");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<10} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>8}",
            r.direction.name(),
            100.0 * r.cmc[0],
            100.0 * r.cmc[1],
            100.0 * r.cmc[2],
            100.0 * r.cmc[3],
            100.0 * r.map,
            r.num_queries
        );
    }
    s
}

/// One row of the frames-per-tracklet sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub report: EvalReport,
}

pub fn write_sweep<W: Write>(w: &mut W, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "n,r1,r5,r10,r20,map")?;
    for r in rows {
        let c = &r.report.cmc;
        writeln!(w, "{},{:.6},{:.6},{:.6},{:.6},{:.6}", r.n, c[0], c[1], c[2], c[3], r.report.map)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn label(identity: u32, camera: u8) -> Label {
        Label { identity, camera }
    }

    /// One-dimensional features ordering the gallery as listed.
    fn ranked(relevance: &[bool]) -> (Vec<f64>, Vec<Label>) {
        let n = relevance.len();
        let sims = (0..n).map(|i| 1.0 - i as f64 / n as f64).collect();
        let labels = relevance.iter().map(|&r| label(if r { 1 } else { 2 }, 9)).collect();
        (sims, labels)
    }

    #[test]
    fn similarity_examples() {
        let q = Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let g = Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = similarity_matrix(&q, &g).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = Tensor::<f64>::uniform(vec![3, 4], 1.0, &mut rng);
        let g = Tensor::<f64>::uniform(vec![5, 4], 1.0, &mut rng);
        let mut g5 = g.clone();
        g5.data_mut()[8..12].iter_mut().for_each(|v| *v *= 5.0);
        let (a, b) = (similarity_matrix(&q, &g).unwrap(), similarity_matrix(&q, &g5).unwrap());
        for i in 0..3 {
            assert!((a.data()[i * 5 + 2] - b.data()[i * 5 + 2]).abs() < 1e-15);
        }
        assert!(similarity_matrix(&q, &Tensor::<f64>::zeros(vec![2, 3])).is_err());
    }

    #[test]
    fn hand_ap_cases() {
        let q = label(1, 0);
        let (s, g) = ranked(&[true, false, true, false]);
        let o = score_query(&s, q, &g).unwrap();
        assert!((o.ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(o.first_hit, 1);
        let (s, g) = ranked(&[true, true, false]);
        assert_eq!(score_query(&s, q, &g).unwrap().ap, 1.0);
        let (s, g) = ranked(&[false, false, true, false, false]);
        let o = score_query(&s, q, &g).unwrap();
        assert_eq!(o.first_hit, 3);
        assert!((o.ap - 1.0 / 3.0).abs() < 1e-15);
        let (s, g) = ranked(&[false, false]);
        assert!(score_query(&s, q, &g).is_none());
    }

    #[test]
    fn same_camera_matches_are_excluded_and_ties_use_index() {
        let q = label(1, 3);
        let sims = [0.9, 0.9, 0.5];
        let g = [label(1, 3), label(2, 4), label(1, 5)];
        let o = score_query(&sims, q, &g).unwrap();
        assert_eq!(o.first_hit, 2);
        // Tie: the earlier gallery index ranks first.
        let g = [label(2, 4), label(1, 5), label(3, 4)];
        assert_eq!(score_query(&[0.7, 0.7, 0.7], q, &g).unwrap().first_hit, 2);
    }

    #[test]
    fn cmc_counts_and_exclusions() {
        let q = Tensor::<f64>::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let g = Tensor::<f64>::new(vec![6, 1], vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5]).unwrap();
        let g = Tensor::new(vec![6, 2], g.data().iter().enumerate().flat_map(|(i, &v)| [v, i as f64 * 0.3]).collect()).unwrap();
        let q = Tensor::new(vec![2, 2], q.data().iter().flat_map(|&v| [v, 0.0]).collect()).unwrap();
        let gl: Vec<Label> = [2, 3, 1, 4, 5, 6].iter().map(|&i| label(i, 0)).collect();
        let ql = [label(1, 7), label(9, 7)];
        let r = evaluate(&q, &ql, &g, &gl, Direction::IrToVis).unwrap();
        assert_eq!(r.num_queries, 1);
        assert_eq!(r.excluded, 1);
        assert_eq!(r.cmc, [0.0, 1.0, 1.0, 1.0]);
        assert!((r.map - 1.0 / 3.0).abs() < 1e-12);
        assert!(r.csv_row().starts_with("ir_to_vis,0.000000,1.000000"));
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> RankingInstance {
        let d = 4;
        // Coarse values make exact similarity ties likely.
        let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| rng.random_range(-2i32..=2) as f64).collect() };
        let query = (label(rng.random_range(0..5), rng.random_range(0..3)), vec(rng));
        let gallery = (0..n)
            .map(|_| (label(rng.random_range(0..5), rng.random_range(0..3)), vec(rng)))
            .collect();
        RankingInstance { query, gallery }
    }

    proptest! {
        #[test]
        fn evaluate_matches_oracle(seed in 0u64..100_000, n in 1usize..120) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = random_instance(&mut rng, n);
            let q = Tensor::new(vec![1, 4], inst.query.1.clone()).unwrap();
            let g = Tensor::new(vec![n, 4], inst.gallery.iter().flat_map(|(_, v)| v.clone()).collect()).unwrap();
            let sims = similarity_matrix(&q, &g).unwrap();
            let labels: Vec<Label> = inst.gallery.iter().map(|(l, _)| *l).collect();
            let got = score_query(sims.row(0), inst.query.0, &labels);
            let want = brute_force_oracle(&inst);
            match (got, want) {
                (Some(a), Some(b)) => {
                    prop_assert!((a.ap - b.ap).abs() <= 1e-12);
                    prop_assert_eq!(a.first_hit, b.first_hit);
                }
                (None, None) => {}
                other => prop_assert!(false, "{:?}", other),
            }
        }

        #[test]
        fn report_invariants(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Tensor::<f64>::uniform(vec![8, 3], 1.0, &mut rng);
            let g = Tensor::<f64>::uniform(vec![30, 3], 1.0, &mut rng);
            let ql: Vec<Label> = (0..8).map(|i| label(i % 4, 0)).collect();
            let gl: Vec<Label> = (0..30).map(|i| label(i % 6, 1)).collect();
            let r = evaluate(&q, &ql, &g, &gl, Direction::VisToIr).unwrap();
            prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!((0.0..=1.0).contains(&r.map));
            // Positive rescaling of one feature changes nothing.
            let mut g2 = g.clone();
            let k = rng.random_range(0..30);
            let s = rng.random_range(0.1..10.0);
            g2.data_mut()[k * 3..k * 3 + 3].iter_mut().for_each(|v| *v *= s);
            let r2 = evaluate(&q, &ql, &g2, &gl, Direction::VisToIr).unwrap();
            prop_assert!((r.map - r2.map).abs() < 1e-12);
            prop_assert_eq!(r.cmc, r2.cmc);
        }
    }

    #[test]
    fn table_and_sweep_output() {
        let r = EvalReport {
            direction: Direction::VisToIr,
            cmc: [0.5, 0.75, 1.0, 1.0],
            map: 0.625,
            num_queries: 4,
            excluded: 0,
        };
        assert!(render_table(std::slice::from_ref(&r)).contains("vis_to_ir"));
        let mut buf = Vec::new();
        write_sweep(&mut buf, &[SweepRow { n: 1, report: r.clone() }, SweepRow { n: 6, report: r }]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("n,r1,r5,r10,r20,map\n1,0.500000"));
    }
}
