//! Exact information quantities on finite distributions.
//!
//! The neural estimators elsewhere in this crate (probes, representation
//! objectives) only bound mutual information. On small discrete spaces the
//! same quantities can be computed exactly, which is what these oracles do:
//! they validate the bound machinery by checking its direction and its
//! equality conditions where the ground truth is available in closed form.

use crate::error::{Error, Result};

/// Plug-in entropies of a joint distribution, in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct MiReport {
    pub mi: f64,
    pub h_a: f64,
    pub h_b: f64,
    pub h_a_given_b: f64,
}

/// Outcome of checking a variational bound against the exact quantity.
///
/// `gap` is the slack on the bound's valid side, so a correct bound always
/// has `gap >= 0` up to float error, with equality exactly when the
/// variational distribution matches the true conditional.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundCheck {
    pub information: f64,
    pub bound: f64,
    pub gap: f64,
}

fn validate_joint(joint: &[Vec<f64>]) -> Result<()> {
    if joint.is_empty() || joint[0].is_empty() {
        return Err(Error::dim("joint table is empty"));
    }
    let cols = joint[0].len();
    let mut total = 0.0;
    for row in joint {
        if row.len() != cols {
            return Err(Error::dim(format!(
                "ragged joint table: rows of {} and {} entries",
                cols,
                row.len()
            )));
        }
        for &p in row {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::domain(format!("probability {p} outside [0, 1]")));
            }
            total += p;
        }
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("joint table sums to {total}, not 1")));
    }
    Ok(())
}

fn validate_rows(name: &str, rows: &[Vec<f64>], cols: usize) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::dim(format!(
                "{name} row {i} has {} entries, expected {cols}",
                row.len()
            )));
        }
        let mut total = 0.0;
        for &p in row {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::domain(format!(
                    "{name} row {i} has probability {p} outside [0, 1]"
                )));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!(
                "{name} row {i} sums to {total}, not 1"
            )));
        }
    }
    Ok(())
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// Exact mutual information and entropies of a finite joint `p(a, b)`,
/// `joint[i][j] = P(A = i, B = j)`.
pub fn discrete_mi_oracle(joint: &[Vec<f64>]) -> Result<MiReport> {
    validate_joint(joint)?;
    let cols = joint[0].len();
    let pa: Vec<f64> = joint.iter().map(|row| row.iter().sum()).collect();
    let pb: Vec<f64> = (0..cols).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for (i, row) in joint.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    let h_a = entropy(&pa);
    Ok(MiReport {
        mi,
        h_a,
        h_b: entropy(&pb),
        h_a_given_b: h_a - mi,
    })
}

/// Checks that a decoder-based estimate stays below the label information.
///
/// For any decoder `q(y|z)`, `E_{p(z,y)}[ln q(y|z)] + H(Y) <= I(Z;Y)`: a
/// classifier reading `z` can extract at most the information `z` carries.
/// `joint[i][j] = P(Z = i, Y = j)`; `decoder[i]` is the distribution over
/// `y` the decoder outputs for `Z = i`. Slack is `information - bound`, zero
/// exactly when the decoder is the true posterior `p(y|z)`.
pub fn variational_lower_bound_check(
    joint: &[Vec<f64>],
    decoder: &[Vec<f64>],
) -> Result<BoundCheck> {
    validate_joint(joint)?;
    if decoder.len() != joint.len() {
        return Err(Error::dim(format!(
            "decoder has {} rows for {} latent states",
            decoder.len(),
            joint.len()
        )));
    }
    validate_rows("decoder", decoder, joint[0].len())?;
    let report = discrete_mi_oracle(joint)?;
    let mut expected_log_q = 0.0;
    for (row, q_row) in joint.iter().zip(decoder) {
        for (&p, &q) in row.iter().zip(q_row) {
            if p > 0.0 {
                expected_log_q += p * q.ln();
            }
        }
    }
    let bound = expected_log_q + report.h_b;
    Ok(BoundCheck {
        information: report.mi,
        bound,
        gap: report.mi - bound,
    })
}

/// Checks that an encoder-KL average stays above the conditional information.
///
/// For any per-concept reference `q(z|c)`,
/// `E_{p(x)}[KL(p(z|x) || q(z|c(x)))] >= I(Z;X|C)`: the average divergence
/// from a concept-level summary cannot be smaller than the within-concept
/// information the encoder keeps about `x`. `px` is the input distribution,
/// `concept_of[i]` the concept of input `i`, `encoder[i]` the distribution
/// `p(z|x_i)`, and `reference[c]` the summary `q(z|c)`. Slack is
/// `bound - information`, zero exactly when `q(z|c)` is the true
/// within-concept latent marginal `p(z|c)`.
pub fn conditional_upper_bound_check(
    px: &[f64],
    concept_of: &[usize],
    encoder: &[Vec<f64>],
    reference: &[Vec<f64>],
) -> Result<BoundCheck> {
    let n = px.len();
    if n == 0 {
        return Err(Error::dim("input distribution is empty"));
    }
    if concept_of.len() != n || encoder.len() != n {
        return Err(Error::dim(format!(
            "px has {n} states, concept_of {} and encoder {}",
            concept_of.len(),
            encoder.len()
        )));
    }
    let total: f64 = px.iter().sum();
    if px.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain("px is not a probability distribution"));
    }
    let z_states = encoder[0].len();
    validate_rows("encoder", encoder, z_states)?;
    validate_rows("reference", reference, z_states)?;
    let n_concepts = reference.len();
    if let Some(&bad) = concept_of.iter().find(|&&c| c >= n_concepts) {
        return Err(Error::dim(format!(
            "concept index {bad} out of range for {n_concepts} reference rows"
        )));
    }

    // True within-concept marginals p(z|c) and concept weights p(c).
    let mut pc = vec![0.0; n_concepts];
    let mut pz_given_c = vec![vec![0.0; z_states]; n_concepts];
    for i in 0..n {
        pc[concept_of[i]] += px[i];
        for (zc, &e) in pz_given_c[concept_of[i]].iter_mut().zip(&encoder[i]) {
            *zc += px[i] * e;
        }
    }
    for (c, row) in pz_given_c.iter_mut().enumerate() {
        if pc[c] > 0.0 {
            for v in row.iter_mut() {
                *v /= pc[c];
            }
        }
    }

    let kl = |p: &[f64], q: &[f64]| -> f64 {
        p.iter()
            .zip(q)
            .filter(|(&pv, _)| pv > 0.0)
            .map(|(&pv, &qv)| pv * (pv / qv).ln())
            .sum()
    };
    let information: f64 = (0..n)
        .map(|i| px[i] * kl(&encoder[i], &pz_given_c[concept_of[i]]))
        .sum();
    let bound: f64 = (0..n)
        .map(|i| px[i] * kl(&encoder[i], &reference[concept_of[i]]))
        .sum();
    Ok(BoundCheck {
        information,
        bound,
        gap: bound - information,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "rank correlation over {} and {} values",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::usage("rank correlation needs at least 2 pairs"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::domain("rank correlation input is not finite"));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        var_a += (x - mean).powi(2);
        var_b += (y - mean).powi(2);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::undefined_metric(
            "rank correlation of a constant sequence",
        ));
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // 1-based ranks; tied entries share the mean of their positions.
        let shared = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = shared;
        }
        start = end;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn independent_variables_carry_no_information() {
        let joint = vec![vec![0.25, 0.25], vec![0.25, 0.25]];
        let r = discrete_mi_oracle(&joint).unwrap();
        assert_eq!(r.mi, 0.0);
        assert!((r.h_a - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((r.h_a_given_b - r.h_a).abs() < 1e-15);
    }

    #[test]
    fn identical_variables_share_their_entropy() {
        let joint = vec![vec![0.5, 0.0], vec![0.0, 0.5]];
        let r = discrete_mi_oracle(&joint).unwrap();
        assert!((r.mi - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(r.h_a_given_b.abs() < 1e-15);
    }

    #[test]
    fn correlated_table_matches_hand_computed_value() {
        // I = 2(0.4 ln 1.6 + 0.1 ln 0.4) = 0.192745...
        let joint = vec![vec![0.4, 0.1], vec![0.1, 0.4]];
        let r = discrete_mi_oracle(&joint).unwrap();
        assert!((r.mi - 0.192745).abs() < 1e-5, "mi {}", r.mi);
        assert!((r.h_a - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((r.h_b - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn malformed_tables_are_rejected() {
        assert!(discrete_mi_oracle(&[]).is_err());
        assert!(discrete_mi_oracle(&[vec![0.5, 0.6]]).is_err());
        assert!(discrete_mi_oracle(&[vec![1.2, -0.2]]).is_err());
        assert!(discrete_mi_oracle(&[vec![0.5, 0.25], vec![0.25]]).is_err());
    }

    fn posterior_decoder(joint: &[Vec<f64>]) -> Vec<Vec<f64>> {
        joint
            .iter()
            .map(|row| {
                let pz: f64 = row.iter().sum();
                if pz > 0.0 {
                    row.iter().map(|&p| p / pz).collect()
                } else {
                    vec![1.0 / row.len() as f64; row.len()]
                }
            })
            .collect()
    }

    #[test]
    fn decoder_bound_is_tight_at_the_posterior() {
        let joint = vec![vec![0.3, 0.1, 0.05], vec![0.05, 0.2, 0.3]];
        let check =
            variational_lower_bound_check(&joint, &posterior_decoder(&joint)).unwrap();
        assert!(check.gap.abs() < 1e-12, "gap {}", check.gap);
    }

    #[test]
    fn worse_decoders_open_the_gap() {
        let joint = vec![vec![0.3, 0.1, 0.05], vec![0.05, 0.2, 0.3]];
        let blurred = vec![vec![1.0 / 3.0; 3]; 2];
        let check = variational_lower_bound_check(&joint, &blurred).unwrap();
        assert!(check.gap > 0.01, "gap {}", check.gap);
        assert!(check.bound < check.information);
    }

    #[test]
    fn reference_bound_is_tight_at_the_concept_marginal() {
        let px = [0.3, 0.2, 0.25, 0.25];
        let concept_of = [0, 0, 1, 1];
        let encoder = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.5, 0.3, 0.2],
            vec![0.1, 0.2, 0.7],
            vec![0.2, 0.2, 0.6],
        ];
        // q(z|c) = p(z|c) exactly.
        let mut reference = vec![vec![0.0; 3]; 2];
        let mut pc = [0.0; 2];
        for i in 0..4 {
            pc[concept_of[i]] += px[i];
            for z in 0..3 {
                reference[concept_of[i]][z] += px[i] * encoder[i][z];
            }
        }
        for c in 0..2 {
            for z in 0..3 {
                reference[c][z] /= pc[c];
            }
        }
        let check =
            conditional_upper_bound_check(&px, &concept_of, &encoder, &reference).unwrap();
        assert!(check.gap.abs() < 1e-12, "gap {}", check.gap);
        assert!(check.information > 0.0);

        let off = vec![vec![1.0 / 3.0; 3]; 2];
        let loose = conditional_upper_bound_check(&px, &concept_of, &encoder, &off).unwrap();
        assert!(loose.gap > 0.0);
        assert_eq!(loose.information, check.information);
    }

    proptest! {
        #[test]
        fn decoder_bound_never_exceeds_information(
            raw_joint in proptest::collection::vec(1e-3..1.0f64, 12),
            raw_decoder in proptest::collection::vec(1e-3..1.0f64, 12),
        ) {
            let total: f64 = raw_joint.iter().sum();
            let joint: Vec<Vec<f64>> = raw_joint
                .chunks(4)
                .map(|c| c.iter().map(|v| v / total).collect())
                .collect();
            let decoder: Vec<Vec<f64>> = raw_decoder
                .chunks(4)
                .map(|c| {
                    let s: f64 = c.iter().sum();
                    c.iter().map(|v| v / s).collect()
                })
                .collect();
            let check = variational_lower_bound_check(&joint, &decoder).unwrap();
            prop_assert!(check.gap >= -1e-12, "gap {}", check.gap);
        }

        #[test]
        fn reference_bound_never_undershoots_information(
            raw_px in proptest::collection::vec(1e-3..1.0f64, 6),
            raw_encoder in proptest::collection::vec(1e-3..1.0f64, 30),
            raw_reference in proptest::collection::vec(1e-3..1.0f64, 10),
        ) {
            let total: f64 = raw_px.iter().sum();
            let px: Vec<f64> = raw_px.iter().map(|v| v / total).collect();
            let concept_of: Vec<usize> = (0..6).map(|i| i % 2).collect();
            let norm_rows = |raw: &[f64]| -> Vec<Vec<f64>> {
                raw.chunks(5)
                    .map(|c| {
                        let s: f64 = c.iter().sum();
                        c.iter().map(|v| v / s).collect()
                    })
                    .collect()
            };
            let check = conditional_upper_bound_check(
                &px,
                &concept_of,
                &norm_rows(&raw_encoder),
                &norm_rows(&raw_reference),
            )
            .unwrap();
            prop_assert!(check.gap >= -1e-12, "gap {}", check.gap);
            prop_assert!(check.information >= -1e-12);
        }
    }

    #[test]
    fn rank_correlation_hits_the_endpoints() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up = [2.0, 3.0, 5.0, 7.0, 11.0];
        let down = [0.5, 0.4, 0.3, 0.2, 0.1];
        assert!((spearman(&a, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &down).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_correlation_averages_ties() {
        let a = [1.0, 2.0, 2.0, 3.0];
        let b = [10.0, 20.0, 20.0, 30.0];
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        // Monotone but nonlinear relation still ranks perfectly.
        let c = [1.0, 4.0, 4.0, 100.0];
        assert!((spearman(&a, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_rank_inputs_are_rejected() {
        assert!(spearman(&[1.0], &[2.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[2.0]).is_err());
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(spearman(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }
}
