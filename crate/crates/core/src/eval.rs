//! SI-SDR with permutation search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixalg::{all_permutations, Permutation, StackedSignal};

/// Reported SI-SDR values are clamped to `±SI_SDR_LIMIT_DB`.
pub const SI_SDR_LIMIT_DB: f64 = 60.0;

/// Scale-invariant signal-to-distortion ratio in dB.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::shape(
            format!("estimate of length {}", reference.len()),
            format!("length {}", estimate.len()),
        ));
    }
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::InvalidParam("SI-SDR reference is all zeros".into()));
    }
    let alpha = estimate.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let noise_energy: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| (alpha * r - e).powi(2))
        .sum();
    let value = if noise_energy <= f64::EPSILON * f64::EPSILON * target_energy {
        SI_SDR_LIMIT_DB
    } else if target_energy == 0.0 {
        -SI_SDR_LIMIT_DB
    } else {
        10.0 * (target_energy / noise_energy).log10()
    };
    Ok(value.clamp(-SI_SDR_LIMIT_DB, SI_SDR_LIMIT_DB))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitResult {
    /// Reference `i` is matched with estimate `permutation[i]`.
    pub permutation: Permutation,
    pub per_source_db: Vec<f64>,
    pub mean_db: f64,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean that does not depend on the order of `values`, so relabeling
/// sources cannot change the last bit.
fn order_free_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    mean(&v)
}

/// Exhaustive permutation search maximising mean SI-SDR; ties resolve to the
/// lexicographically smallest permutation.
pub fn pit_eval(estimates: &StackedSignal, references: &StackedSignal) -> Result<PitResult> {
    estimates.check_same_shape(references)?;
    let k = references.num_sources();
    // pairwise[i][j] = SI-SDR of estimate j against reference i
    let mut pairwise = vec![vec![0.0; k]; k];
    for (i, row) in pairwise.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = si_sdr(estimates.row(j), references.row(i))?;
        }
    }
    let mut best: Option<PitResult> = None;
    for perm in all_permutations(k)? {
        let per_source: Vec<f64> = (0..k).map(|i| pairwise[i][perm.as_slice()[i]]).collect();
        let m = order_free_mean(&per_source);
        if best.as_ref().is_none_or(|b| m > b.mean_db) {
            best = Some(PitResult {
                permutation: perm,
                per_source_db: per_source,
                mean_db: m,
            });
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Mean SI-SDR when the mixture itself is used as every source estimate.
pub fn mixture_baseline(references: &StackedSignal, y: &[f64]) -> Result<f64> {
    let per_source = references
        .rows()
        .map(|r| si_sdr(y, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&per_source))
}

pub fn si_sdr_improvement(estimates: &StackedSignal, references: &StackedSignal, y: &[f64]) -> Result<f64> {
    Ok(pit_eval(estimates, references)?.mean_db - mixture_baseline(references, y)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub id: u64,
    pub permutation: Permutation,
    pub per_source_db: Vec<f64>,
    pub mean_db: f64,
    pub improvement_db: f64,
    /// Slots for externally computed perceptual metrics.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pesq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub estoi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean_si_sdr_db: f64,
    pub median_si_sdr_db: f64,
    pub mean_improvement_db: f64,
    pub median_improvement_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: Vec<InstanceReport>,
    pub aggregate: Aggregate,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn evaluate_instance(id: u64, estimates: &StackedSignal, references: &StackedSignal, y: &[f64]) -> Result<InstanceReport> {
    let pit = pit_eval(estimates, references)?;
    let baseline = mixture_baseline(references, y)?;
    Ok(InstanceReport {
        id,
        improvement_db: pit.mean_db - baseline,
        permutation: pit.permutation,
        per_source_db: pit.per_source_db,
        mean_db: pit.mean_db,
        pesq: None,
        estoi: None,
    })
}

impl EvalReport {
    pub fn from_instances(instances: Vec<InstanceReport>) -> Self {
        let sdr: Vec<f64> = instances.iter().map(|r| r.mean_db).collect();
        let imp: Vec<f64> = instances.iter().map(|r| r.improvement_db).collect();
        let aggregate = Aggregate {
            count: instances.len(),
            mean_si_sdr_db: mean(&sdr),
            median_si_sdr_db: median(&sdr),
            mean_improvement_db: mean(&imp),
            median_improvement_db: median(&imp),
        };
        Self { instances, aggregate }
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut out = format!("{:>6}  {:>12}  {:>12}  {}\n", "id", "si-sdr[dB]", "improve[dB]", "perm");
        for r in &self.instances {
            out += &format!(
                "{:>6}  {:>12.3}  {:>12.3}  {:?}\n",
                r.id,
                r.mean_db,
                r.improvement_db,
                r.permutation.as_slice()
            );
        }
        let a = &self.aggregate;
        out += &format!("{:>6}  {:>12.3}  {:>12.3}\n", "mean", a.mean_si_sdr_db, a.mean_improvement_db);
        out += &format!("{:>6}  {:>12.3}  {:>12.3}\n", "median", a.median_si_sdr_db, a.median_improvement_db);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixalg::apply_permutation;
    use crate::rng::{root_rng, standard_normals};

    #[test]
    fn si_sdr_cases() {
        let r = [1.0, -2.0, 0.5, 3.0];
        let twice: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&twice, &r).unwrap(), 60.0);
        // Orthogonal noise with 1% of the reference energy.
        let r = [1.0, 1.0, 0.0, 0.0];
        let e = [1.0, 1.0, 0.1, 0.1];
        assert!((si_sdr(&e, &r).unwrap() - 20.0).abs() < 1e-9);
        let e = [0.0, 0.0, 1.0, -1.0];
        assert_eq!(si_sdr(&e, &r).unwrap(), -60.0);
        assert!(si_sdr(&e, &[0.0; 4]).is_err());
        assert!(si_sdr(&e[..3], &r).is_err());
    }

    #[test]
    fn scale_invariance() {
        let mut rng = root_rng(1);
        for _ in 0..20 {
            let r = standard_normals(&mut rng, 256);
            let e = standard_normals(&mut rng, 256);
            let e: Vec<f64> = e.iter().zip(&r).map(|(a, b)| 0.3 * a + b).collect();
            let base = si_sdr(&e, &r).unwrap();
            for c in [-2.0, 0.5, 10.0] {
                let scaled: Vec<f64> = e.iter().map(|v| c * v).collect();
                assert!((si_sdr(&scaled, &r).unwrap() - base).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pit_cases() {
        let mut rng = root_rng(2);
        let refs = StackedSignal::new(2, 64, standard_normals(&mut rng, 128)).unwrap();
        let swap = Permutation::new(vec![1, 0]).unwrap();
        let swapped = apply_permutation(&refs, &swap).unwrap();
        let res = pit_eval(&swapped, &refs).unwrap();
        assert_eq!(res.permutation, swap);
        assert_eq!(res.mean_db, 60.0);
        let res = pit_eval(&refs, &refs).unwrap();
        assert!(res.permutation.is_identity());

        let refs = StackedSignal::new(3, 64, standard_normals(&mut rng, 192)).unwrap();
        let noise = StackedSignal::new(3, 64, standard_normals(&mut rng, 192)).unwrap();
        let est = refs.zip_with(&noise, |a, b| a + 0.8 * b).unwrap();
        let base = pit_eval(&est, &refs).unwrap();
        let identity_mean = mean(&(0..3).map(|i| si_sdr(est.row(i), refs.row(i)).unwrap()).collect::<Vec<_>>());
        assert!(base.mean_db >= identity_mean);
        for perm in all_permutations(3).unwrap() {
            let res = pit_eval(&apply_permutation(&est, &perm).unwrap(), &refs).unwrap();
            assert_eq!(res.mean_db.to_bits(), base.mean_db.to_bits());
        }
    }

    #[test]
    fn improvement_cases() {
        let mut rng = root_rng(3);
        let refs = StackedSignal::new(2, 128, standard_normals(&mut rng, 256)).unwrap();
        let y = refs.row_sum();
        let imp = si_sdr_improvement(&refs, &refs, &y).unwrap();
        assert!(imp > 0.0 && imp.is_finite());
        let replicated = StackedSignal::new(2, 128, y.repeat(2)).unwrap();
        assert_eq!(si_sdr_improvement(&replicated, &refs, &y).unwrap(), 0.0);

        // Orthogonal, equal-energy sources: the mixture scores 0 dB against each.
        let refs = StackedSignal::from_rows(&[vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0, 1.0]]).unwrap();
        let y = refs.row_sum();
        assert!(mixture_baseline(&refs, &y).unwrap().abs() < 1e-12);
    }

    #[test]
    fn report_aggregates() {
        let mk = |id, v: f64| InstanceReport {
            id,
            permutation: Permutation::identity(2),
            per_source_db: vec![v, v],
            mean_db: v,
            improvement_db: v - 1.0,
            pesq: None,
            estoi: None,
        };
        let report = EvalReport::from_instances(vec![mk(0, 1.0), mk(1, 5.0), mk(2, 3.0)]);
        assert_eq!(report.aggregate.median_si_sdr_db, 3.0);
        assert_eq!(report.aggregate.mean_improvement_db, 2.0);
        let json = serde_json::to_string(&report).unwrap();
        assert!(!json.contains("pesq"));
        assert!(report.table().contains("median"));
    }
}
