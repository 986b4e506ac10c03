//! Cluster-quality metrics over phone/cluster co-occurrences, the per-layer
//! analysis table, and word error rate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::synth::SyntheticUtterance;
use crate::errors::{Error, Result};
use crate::labels::kmeans::{kmeans_assign, kmeans_fit, CodebookSource};
use crate::labels::targets::{align_labels_to_encoder, KMEANS_MAX_ITERS, KMEANS_TOL};
use crate::model::ModelConfig;
use crate::train::ParamStore;
use crate::{Real, Tape, Tensor};

/// Frame-level phone × cluster co-occurrence counts.
#[derive(Clone, Debug, Default)]
pub struct JointCounts {
    counts: Vec<u64>,
    n_phones: usize,
    n_clusters: usize,
    total: u64,
}

impl JointCounts {
    pub fn new() -> Self {
        JointCounts::default()
    }

    /// Accumulate one aligned utterance.
    pub fn accumulate(&mut self, phones: &[usize], clusters: &[usize]) -> Result<()> {
        if phones.len() != clusters.len() {
            return Err(Error::LengthMismatch {
                what: "phones vs clusters".into(),
                lhs: phones.len(),
                rhs: clusters.len(),
            });
        }
        for (&y, &z) in phones.iter().zip(clusters) {
            self.grow(y + 1, z + 1);
            self.counts[y * self.n_clusters + z] += 1;
            self.total += 1;
        }
        Ok(())
    }

    fn grow(&mut self, phones: usize, clusters: usize) {
        let np = self.n_phones.max(phones);
        let nc = self.n_clusters.max(clusters);
        if np == self.n_phones && nc == self.n_clusters {
            return;
        }
        let mut counts = vec![0u64; np * nc];
        for y in 0..self.n_phones {
            for z in 0..self.n_clusters {
                counts[y * nc + z] = self.counts[y * self.n_clusters + z];
            }
        }
        self.counts = counts;
        self.n_phones = np;
        self.n_clusters = nc;
    }

    pub fn count(&self, phone: usize, cluster: usize) -> u64 {
        if phone < self.n_phones && cluster < self.n_clusters {
            self.counts[phone * self.n_clusters + cluster]
        } else {
            0
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Build from an explicit count matrix (rows phones, columns clusters).
    pub fn from_matrix(rows: &[Vec<u64>]) -> Self {
        let n_phones = rows.len();
        let n_clusters = rows.first().map_or(0, |r| r.len());
        let mut counts = Vec::with_capacity(n_phones * n_clusters);
        let mut total = 0;
        for r in rows {
            assert_eq!(r.len(), n_clusters, "ragged count matrix");
            total += r.iter().sum::<u64>();
            counts.extend_from_slice(r);
        }
        JointCounts {
            counts,
            n_phones,
            n_clusters,
            total,
        }
    }
}

/// Accumulate over a set of aligned utterances.
pub fn joint_counts(pairs: &[(&[usize], &[usize])]) -> Result<JointCounts> {
    let mut jc = JointCounts::new();
    for (phones, clusters) in pairs {
        jc.accumulate(phones, clusters)?;
    }
    if jc.total == 0 {
        return Err(Error::EmptyInput("joint counts need at least one frame".into()));
    }
    Ok(jc)
}

/// The three co-occurrence metrics. `pnmi` is `None` when the phone
/// distribution carries no entropy (a single phone).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct ClusterQuality {
    pub cluster_purity: f64,
    pub phone_purity: f64,
    pub pnmi: Option<f64>,
}

fn entropy(probs: impl Iterator<Item = f64>) -> f64 {
    probs.filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

/// Purities and phone-normalized mutual information from joint counts:
/// phone purity sums the dominant phone mass per cluster, cluster purity the
/// dominant cluster mass per phone, and `pnmi = I(Y;Z) / H(Y)` in nats.
pub fn purity_and_pnmi(jc: &JointCounts) -> Result<ClusterQuality> {
    if jc.total == 0 {
        return Err(Error::EmptyInput("joint counts are empty".into()));
    }
    let total = jc.total as f64;
    let p = |y: usize, z: usize| jc.count(y, z) as f64 / total;
    let py: Vec<f64> = (0..jc.n_phones)
        .map(|y| (0..jc.n_clusters).map(|z| p(y, z)).sum())
        .collect();
    let pz: Vec<f64> = (0..jc.n_clusters)
        .map(|z| (0..jc.n_phones).map(|y| p(y, z)).sum())
        .collect();

    let phone_purity: f64 = (0..jc.n_clusters)
        .map(|z| {
            (0..jc.n_phones)
                .map(|y| p(y, z))
                .fold(0.0f64, f64::max)
        })
        .sum();
    let cluster_purity: f64 = (0..jc.n_phones)
        .map(|y| {
            (0..jc.n_clusters)
                .map(|z| p(y, z))
                .fold(0.0f64, f64::max)
        })
        .sum();

    let h_y = entropy(py.iter().copied());
    let h_z = entropy(pz.iter().copied());
    let h_yz = entropy(
        (0..jc.n_phones).flat_map(|y| (0..jc.n_clusters).map(move |z| (y, z)))
            .map(|(y, z)| p(y, z)),
    );
    let mi = (h_y + h_z - h_yz).max(0.0);
    let pnmi = if h_y > 0.0 { Some(mi / h_y) } else { None };
    Ok(ClusterQuality {
        cluster_purity,
        phone_purity,
        pnmi,
    })
}

/// Edit-distance word error rate: (substitutions + insertions + deletions)
/// divided by the reference length.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyInput("WER reference".into()));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m] as f64 / n as f64)
}

/// Character error rate of two transcripts.
pub fn wer_chars(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    wer(&r, &h)
}

/// One row of the layer analysis table.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct LayerQualityRow {
    pub layer: usize,
    pub quality: ClusterQuality,
}

/// For every transformer layer: fit k-means on a sampled fraction of the fit
/// corpus, assign on the evaluation corpus, and score the assignments
/// against the frame-level phone truth (decimated to the 20 ms frame rate).
pub fn layerwise_quality(
    store: &ParamStore<Real>,
    model: &ModelConfig,
    fit_corpus: &[SyntheticUtterance],
    eval_corpus: &[SyntheticUtterance],
    n_clusters: usize,
    sample_fraction: f64,
    seed: u64,
) -> Result<Vec<LayerQualityRow>> {
    if fit_corpus.is_empty() || eval_corpus.is_empty() {
        return Err(Error::EmptyInput("layer analysis corpora".into()));
    }
    let n_layers = model.encoder.n_layers;
    let take = ((fit_corpus.len() as f64 * sample_fraction).round() as usize)
        .clamp(1, fit_corpus.len());
    let mut fit_idx: Vec<usize> = (0..fit_corpus.len()).collect();
    if take < fit_corpus.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a7e);
        fit_idx.shuffle(&mut rng);
        fit_idx.truncate(take);
        fit_idx.sort_unstable();
    }

    // one encoder pass per utterance, all layers retained
    let extract = |utts: &[&SyntheticUtterance]| -> Result<Vec<Vec<Tensor>>> {
        utts.iter()
            .map(|u| {
                let mut tape = Tape::new();
                let binding = store.bind(&mut tape, &|_| true);
                let states = model.encode(&mut tape, &binding, u.waveform.samples(), None, None)?;
                Ok(states.iter().map(|&v| tape.value(v).clone()).collect())
            })
            .collect()
    };
    let fit_refs: Vec<&SyntheticUtterance> = fit_idx.iter().map(|&i| &fit_corpus[i]).collect();
    let eval_refs: Vec<&SyntheticUtterance> = eval_corpus.iter().collect();
    let fit_states = extract(&fit_refs)?;
    let eval_states = extract(&eval_refs)?;

    let mut rows = Vec::with_capacity(n_layers);
    for layer in 1..=n_layers {
        let d = model.encoder.model_dim;
        let mut fit_data = Vec::new();
        for s in &fit_states {
            fit_data.extend_from_slice(s[layer - 1].data());
        }
        let n_rows = fit_data.len() / d;
        let features = Tensor::new(vec![n_rows, d], fit_data)?;
        let codebook = kmeans_fit(
            &features,
            n_clusters,
            seed ^ (layer as u64).wrapping_mul(0x9E3779B97F4A7C15),
            KMEANS_MAX_ITERS,
            KMEANS_TOL,
            CodebookSource::Layer(layer),
        )?;
        let mut jc = JointCounts::new();
        for (u, s) in eval_refs.iter().zip(&eval_states) {
            let clusters = kmeans_assign(&s[layer - 1], &codebook)?;
            let phones = align_labels_to_encoder(&u.phone_ids, clusters.len());
            jc.accumulate(&phones, &clusters)?;
        }
        rows.push(LayerQualityRow {
            layer,
            quality: purity_and_pnmi(&jc)?,
        });
    }
    Ok(rows)
}

/// Render the analysis table as tab-separated text.
pub fn quality_table_tsv(rows: &[LayerQualityRow]) -> String {
    let mut out = String::from("layer\tcluster_purity\tphone_purity\tpnmi\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{}\n",
            r.layer,
            r.quality.cluster_purity,
            r.quality.phone_purity,
            match r.quality.pnmi {
                Some(v) => format!("{v:.6}"),
                None => "undefined".to_string(),
            }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_example() {
        let jc = joint_counts(&[(&[0, 0, 1][..], &[5, 5, 7][..])]).unwrap();
        assert_eq!(jc.count(0, 5), 2);
        assert_eq!(jc.count(1, 7), 1);
        assert_eq!(jc.count(0, 0), 0);
        assert_eq!(jc.total(), 3);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(joint_counts(&[]).is_err());
        assert!(matches!(
            joint_counts(&[(&[0][..], &[0, 1][..])]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn identical_partitions_score_one() {
        let labels = vec![0usize, 1, 2, 0, 1, 2, 2];
        let jc = joint_counts(&[(&labels[..], &labels[..])]).unwrap();
        let q = purity_and_pnmi(&jc).unwrap();
        assert_eq!(q.cluster_purity, 1.0);
        assert_eq!(q.phone_purity, 1.0);
        assert_eq!(q.pnmi, Some(1.0));
    }

    #[test]
    fn constant_clusters_have_zero_information() {
        let phones = vec![0usize, 0, 0, 1, 1, 2];
        let clusters = vec![3usize; 6];
        let jc = joint_counts(&[(&phones[..], &clusters[..])]).unwrap();
        let q = purity_and_pnmi(&jc).unwrap();
        assert_eq!(q.pnmi, Some(0.0));
        assert!((q.phone_purity - 0.5).abs() < 1e-12, "majority phone mass");
    }

    #[test]
    fn single_phone_pnmi_is_flagged_undefined() {
        let jc = joint_counts(&[(&[0, 0, 0][..], &[0, 1, 2][..])]).unwrap();
        let q = purity_and_pnmi(&jc).unwrap();
        assert_eq!(q.pnmi, None);
        assert_eq!(q.phone_purity, 1.0);
    }

    #[test]
    fn two_by_two_closed_form() {
        // joint counts [[2,0],[1,1]] (rows phones, cols clusters), total 4:
        //   p(y) = (1/2, 1/2)        -> H(Y) = ln 2
        //   p(z) = (3/4, 1/4)        -> H(Z) = -(3/4)ln(3/4) - (1/4)ln(1/4)
        //   H(Y,Z) = 3 * (-(1/4)ln(1/4)) ... with the 1/2 cell:
        //          = -(1/2)ln(1/2) - 2*(1/4)ln(1/4)
        let jc = JointCounts::from_matrix(&[vec![2, 0], vec![1, 1]]);
        let q = purity_and_pnmi(&jc).unwrap();
        assert!((q.phone_purity - 0.75).abs() < 1e-12);
        assert!((q.cluster_purity - 0.75).abs() < 1e-12);
        let h_y = 2f64.ln();
        let h_z = -(0.75f64.ln() * 0.75 + 0.25f64.ln() * 0.25);
        let h_yz = -(0.5f64.ln() * 0.5 + 2.0 * 0.25f64.ln() * 0.25);
        let expect = (h_y + h_z - h_yz) / h_y;
        let got = q.pnmi.unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        // direct arithmetic: I = 0.215761, H(Y) = 0.693147
        assert!((got - 0.311278).abs() < 1e-5, "{got}");
    }

    #[test]
    fn pnmi_bounds_and_relabeling_invariance() {
        let phones: Vec<usize> = (0..200).map(|i| (i * 7) % 5).collect();
        let clusters: Vec<usize> = (0..200).map(|i| (i * 13 + 3) % 6).collect();
        let jc = joint_counts(&[(&phones[..], &clusters[..])]).unwrap();
        let q = purity_and_pnmi(&jc).unwrap();
        let v = q.pnmi.unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert!((0.0..=1.0).contains(&q.phone_purity));
        assert!((0.0..=1.0).contains(&q.cluster_purity));
        // permute both label spaces
        let perm_p = |y: usize| (y + 3) % 5;
        let perm_c = |z: usize| (z + 4) % 6;
        let phones2: Vec<usize> = phones.iter().map(|&y| perm_p(y)).collect();
        let clusters2: Vec<usize> = clusters.iter().map(|&z| perm_c(z)).collect();
        let jc2 = joint_counts(&[(&phones2[..], &clusters2[..])]).unwrap();
        let q2 = purity_and_pnmi(&jc2).unwrap();
        assert!((q2.pnmi.unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn splitting_a_cluster_never_lowers_phone_purity() {
        let phones: Vec<usize> = (0..300).map(|i| (i / 30) % 4).collect();
        let clusters: Vec<usize> = (0..300).map(|i| (i * 11) % 3).collect();
        let base = purity_and_pnmi(&joint_counts(&[(&phones[..], &clusters[..])]).unwrap())
            .unwrap()
            .phone_purity;
        // split cluster 1 into 1 and 3 by parity of the frame index
        let split: Vec<usize> = clusters
            .iter()
            .enumerate()
            .map(|(i, &z)| if z == 1 && i % 2 == 0 { 3 } else { z })
            .collect();
        let after = purity_and_pnmi(&joint_counts(&[(&phones[..], &split[..])]).unwrap())
            .unwrap()
            .phone_purity;
        assert!(after >= base - 1e-12, "{after} < {base}");
    }

    #[test]
    fn wer_reference_cases() {
        assert_eq!(wer(&["a", "b", "c"], &["a", "b", "c"]).unwrap(), 0.0);
        assert!((wer(&["a", "b", "c"], &["a", "x", "c"]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(wer(&["a", "b"], &[] as &[&str]).unwrap(), 1.0);
        assert!(wer(&[] as &[&str], &["a"]).is_err());
        assert_eq!(wer_chars("abc", "abcd").unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn appending_shared_suffix_does_not_increase_distance() {
        let r = vec!["a", "b", "c"];
        let h = vec!["a", "x"];
        let base = wer(&r, &h).unwrap() * r.len() as f64;
        let mut r2 = r.clone();
        let mut h2 = h.clone();
        r2.push("q");
        h2.push("q");
        let after = wer(&r2, &h2).unwrap() * r2.len() as f64;
        assert!(after <= base + 1e-12);
    }
}
