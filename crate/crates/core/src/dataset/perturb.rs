use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Log};
use crate::{Error, Result};

/// Appends `⌈ratio·n⌉` random interactions to every student with `n` logs in
/// `split`. Noise exercises are drawn without replacement from exercises
/// the student has not answered in this split; noise responses are fair
/// coin flips. Existing logs are kept untouched and in order.
///
/// Returns the perturbed split and one warning per student that could not
/// receive its full quota.
pub fn inject_noise(split: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Vec<String>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("noise ratio {ratio} is not in [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logs = split.logs().to_vec();
    let mut warnings = Vec::new();
    if ratio == 0.0 {
        return Ok((split.clone(), warnings));
    }
    for (student, own) in split.logs_by_student().into_iter().enumerate() {
        if own.is_empty() {
            continue;
        }
        // subtract a hair so that e.g. 0.1·30 does not round up to 4
        let wanted = (ratio * own.len() as f64 - 1e-9).ceil().max(0.0) as usize;
        let answered: HashSet<usize> = own.iter().map(|l| l.exercise).collect();
        let candidates: Vec<usize> = (0..split.n_exercises())
            .filter(|j| !answered.contains(j))
            .collect();
        if candidates.is_empty() {
            warnings.push(format!(
                "student {} answered every exercise; no noise added",
                split.ids().students[student]
            ));
            continue;
        }
        let take = wanted.min(candidates.len());
        if take < wanted {
            warnings.push(format!(
                "student {}: only {take} of {wanted} noise logs possible",
                split.ids().students[student]
            ));
        }
        for pick in index::sample(&mut rng, candidates.len(), take) {
            let response = u8::from(rng.gen_bool(0.5));
            logs.push(Log::new(student, candidates[pick], response));
        }
    }
    Ok((split.with_logs(logs)?, warnings))
}

/// Deletes `round(fraction·|logs|)` uniformly chosen logs, never leaving a
/// student that had logs with none. Survivors keep their original order.
pub fn delete_records(train: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("delete fraction {fraction} is not in [0, 1)")));
    }
    let logs = train.logs();
    let target = (fraction * logs.len() as f64).round() as usize;
    let mut remaining = vec![0usize; train.n_students()];
    for l in logs {
        remaining[l.student] += 1;
    }
    let mut order: Vec<usize> = (0..logs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut deleted = vec![false; logs.len()];
    let mut count = 0;
    for idx in order {
        if count == target {
            break;
        }
        let s = logs[idx].student;
        if remaining[s] > 1 {
            remaining[s] -= 1;
            deleted[idx] = true;
            count += 1;
        }
    }
    let kept = logs
        .iter()
        .zip(&deleted)
        .filter(|(_, &d)| !d)
        .map(|(l, _)| *l)
        .collect();
    train.with_logs(kept)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::dataset::IdMap;
    use crate::numeric::SparseAdjacency;

    fn dataset(students: usize, per_student: usize, exercises: usize) -> Dataset {
        let q = SparseAdjacency::from_pattern(exercises, 1, (0..exercises).map(|j| (j, 0))).unwrap();
        let logs = (0..students)
            .flat_map(|i| (0..per_student).map(move |j| Log::new(i, j, (j % 2) as u8)))
            .collect();
        Dataset::new(
            students,
            exercises,
            1,
            logs,
            Arc::new(q),
            Arc::new(SparseAdjacency::empty(1, 1)),
            Arc::new(IdMap::synthetic(students, exercises, 1)),
        )
        .unwrap()
    }

    #[test]
    fn zero_ratio_is_identity() {
        let ds = dataset(3, 10, 40);
        let (out, warnings) = inject_noise(&ds, 0.0, 1).unwrap();
        assert_eq!(out, ds);
        assert!(warnings.is_empty());
    }

    #[test]
    fn half_ratio_appends_ceil_and_keeps_originals() {
        let ds = dataset(3, 10, 40);
        let (out, _) = inject_noise(&ds, 0.5, 1).unwrap();
        assert_eq!(&out.logs()[..30], ds.logs());
        for per in out.logs_by_student() {
            assert_eq!(per.len(), 15);
        }
        let odd = dataset(1, 7, 40);
        let (out, _) = inject_noise(&odd, 0.5, 1).unwrap();
        assert_eq!(out.logs().len(), 7 + 4);
    }

    #[test]
    fn saturated_student_is_skipped_with_warning() {
        let ds = dataset(2, 5, 5);
        let (out, warnings) = inject_noise(&ds, 0.5, 1).unwrap();
        assert_eq!(out.logs().len(), 10);
        assert_eq!(warnings.len(), 2);
    }

    #[test]
    fn noise_response_rate_is_fair() {
        let ds = dataset(400, 20, 200);
        let (out, _) = inject_noise(&ds, 1.0, 11).unwrap();
        let added = &out.logs()[ds.logs().len()..];
        let rate = added.iter().map(|l| f64::from(l.response)).sum::<f64>() / added.len() as f64;
        assert!((rate - 0.5).abs() < 0.05, "{rate}");
    }

    #[test]
    fn deletion_counts_floors_and_determinism() {
        let ds = dataset(10, 10, 20);
        assert_eq!(delete_records(&ds, 0.0, 3).unwrap(), ds);
        let a = delete_records(&ds, 0.2, 3).unwrap();
        assert_eq!(a.logs().len(), 80);
        assert_eq!(a, delete_records(&ds, 0.2, 3).unwrap());
        let sparse = dataset(10, 2, 20);
        let out = delete_records(&sparse, 0.9, 1).unwrap();
        assert!(out.logs_by_student().iter().all(|l| !l.is_empty()));
        assert!(delete_records(&ds, 1.0, 0).is_err());
    }
}
