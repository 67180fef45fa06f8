use crate::error::{contract, Result};

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(r_i − mean r) / std r` with the population standard deviation; all
/// zeros when the spread is below `std_floor`.
pub fn outcome_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return contract(format!("outcome advantages need G >= 2, got {}", rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(crate::Error::Numeric("non-finite reward".into()));
    }
    let (mean, std) = mean_std(rewards);
    if std < std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Per-token advantages from step rewards.
///
/// `steps[i]` lists `(end_index, reward)` of output `i` with strictly
/// increasing end indices; `lens[i]` is `|o_i|`. All step rewards of the
/// group are normalized jointly, and token `t` receives the sum of the
/// normalized rewards of steps ending at or after `t`.
pub fn process_advantages(steps: &[Vec<(usize, f64)>], lens: &[usize], std_floor: f64) -> Result<Vec<Vec<f64>>> {
    if steps.len() != lens.len() {
        return contract(format!("{} step lists for {} outputs", steps.len(), lens.len()));
    }
    let mut all = Vec::new();
    for (i, s) in steps.iter().enumerate() {
        if s.is_empty() {
            return contract(format!("output {i} has no steps"));
        }
        for w in s.windows(2) {
            if w[1].0 <= w[0].0 {
                return contract(format!("step end indices of output {i} are not increasing"));
            }
        }
        if s.last().unwrap().0 >= lens[i] {
            return contract(format!("step of output {i} ends past its {} tokens", lens[i]));
        }
        all.extend(s.iter().map(|(_, r)| *r));
    }
    if all.iter().any(|r| !r.is_finite()) {
        return Err(crate::Error::Numeric("non-finite step reward".into()));
    }
    let (mean, std) = mean_std(&all);
    let norm = |r: f64| if std < std_floor { 0.0 } else { (r - mean) / std };
    Ok(steps
        .iter()
        .zip(lens)
        .map(|(s, &len)| {
            let mut adv = vec![0.0; len];
            // Suffix sums walking the steps backwards.
            let mut acc = 0.0;
            let mut hi = len;
            for &(end, r) in s.iter().rev() {
                for a in &mut adv[end + 1..hi] {
                    *a = acc;
                }
                acc += norm(r);
                hi = end + 1;
            }
            for a in &mut adv[..hi] {
                *a = acc;
            }
            adv
        })
        .collect())
}
