/// Splits `total` integer units proportionally to `weights` by the
/// largest-remainder rule.
///
/// Each share starts at the floor of its exact quota; leftover units go to
/// the largest fractional remainders, ties to the lower index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut shares: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = shares.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable sort keeps ascending index among equal remainders
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra)
    });
    let mut left = total.saturating_sub(assigned);
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        shares[i] += 1;
        left -= 1;
    }
    let mut excess = shares.iter().sum::<usize>().saturating_sub(total);
    for &i in order.iter().rev().cycle() {
        if excess == 0 {
            break;
        }
        if shares[i] > 0 {
            shares[i] -= 1;
            excess -= 1;
        }
    }
    shares
}
