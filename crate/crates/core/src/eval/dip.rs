//! Hartigan's dip test of unimodality.
//!
//! The dip is the largest distance between the empirical CDF and the closest
//! unimodal CDF. The statistic follows the classic greatest-convex-minorant /
//! least-concave-majorant iteration; p-values come from Monte-Carlo replicates
//! of the uniform distribution (the least favourable unimodal null).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::toy::splitmix64;

/// Dip statistic of `values` (need not be sorted). For fewer than two
/// distinct values the minimum possible dip `1/(2n)` is returned.
pub fn dip_statistic(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    dip_sorted(&sorted)
}

/// Dip statistic of already sorted data.
pub fn dip_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n < 2 || sorted[0] == sorted[n - 1] {
        return 0.5 / n as f64;
    }

    // 1-based indexing throughout, slot 0 unused.
    let x: Vec<f64> = std::iter::once(f64::NAN)
        .chain(sorted.iter().copied())
        .collect();
    let mut mn = vec![0usize; n + 1];
    let mut mj = vec![0usize; n + 1];
    let mut gcm = vec![0usize; n + 2];
    let mut lcm = vec![0usize; n + 2];

    // convex minorant index chain
    mn[1] = 1;
    for j in 2..=n {
        mn[j] = j - 1;
        loop {
            let mnj = mn[j];
            let mnmnj = mn[mnj];
            if mnj == 1
                || (x[j] - x[mnj]) * ((mnj - mnmnj) as f64)
                    < (x[mnj] - x[mnmnj]) * ((j - mnj) as f64)
            {
                break;
            }
            mn[j] = mnmnj;
        }
    }

    // concave majorant index chain
    mj[n] = n;
    for k in (1..n).rev() {
        mj[k] = k + 1;
        loop {
            let mjk = mj[k];
            let mjmjk = mj[mjk];
            if mjk == n
                || (x[k] - x[mjk]) * (mjk as f64 - mjmjk as f64)
                    < (x[mjk] - x[mjmjk]) * (k as f64 - mjk as f64)
            {
                break;
            }
            mj[k] = mjmjk;
        }
    }

    let mut low = 1usize;
    let mut high = n;
    let mut dip = 1.0f64;
    loop {
        gcm[1] = high;
        let mut i = 1;
        while gcm[i] > low {
            gcm[i + 1] = mn[gcm[i]];
            i += 1;
        }
        let l_gcm = i;
        let mut ig = l_gcm;
        let mut ix = ig - 1;

        lcm[1] = low;
        i = 1;
        while lcm[i] < high {
            lcm[i + 1] = mj[lcm[i]];
            i += 1;
        }
        let l_lcm = i;
        let mut ih = l_lcm;
        let mut iv = 2usize;

        let mut d = 0.0f64;
        if l_gcm != 2 || l_lcm != 2 {
            loop {
                let gcmix = gcm[ix];
                let lcmiv = lcm[iv];
                if gcmix > lcmiv {
                    let gcmi1 = gcm[ix + 1];
                    let dx = (lcmiv - gcmi1 + 1) as f64
                        - (x[lcmiv] - x[gcmi1]) * (gcmix - gcmi1) as f64 / (x[gcmix] - x[gcmi1]);
                    iv += 1;
                    if dx >= d {
                        d = dx;
                        ig = ix + 1;
                        ih = iv - 1;
                    }
                } else {
                    let lcmiv1 = lcm[iv - 1];
                    let dx = (x[gcmix] - x[lcmiv1]) * (lcmiv - lcmiv1) as f64
                        / (x[lcmiv] - x[lcmiv1])
                        - (gcmix as f64 - lcmiv1 as f64 - 1.0);
                    ix -= 1;
                    if dx >= d {
                        d = dx;
                        ig = ix + 1;
                        ih = iv;
                    }
                }
                ix = ix.max(1);
                iv = iv.min(l_lcm);
                if gcm[ix] == lcm[iv] {
                    break;
                }
            }
        } else {
            d = 1.0;
        }

        if d < dip {
            break;
        }

        let mut dip_l = 0.0f64;
        for j in ig..l_gcm {
            let (jb, je) = (gcm[j + 1], gcm[j]);
            let mut max_t = 1.0f64;
            if je - jb > 1 && x[je] != x[jb] {
                let c = (je - jb) as f64 / (x[je] - x[jb]);
                for jj in jb..=je {
                    let t = (jj - jb + 1) as f64 - (x[jj] - x[jb]) * c;
                    max_t = max_t.max(t);
                }
            }
            dip_l = dip_l.max(max_t);
        }

        let mut dip_u = 0.0f64;
        for j in ih..l_lcm {
            let (jb, je) = (lcm[j], lcm[j + 1]);
            let mut max_t = 1.0f64;
            if je - jb > 1 && x[je] != x[jb] {
                let c = (je - jb) as f64 / (x[je] - x[jb]);
                for jj in jb..=je {
                    let t = (x[jj] - x[jb]) * c - (jj as f64 - jb as f64 - 1.0);
                    max_t = max_t.max(t);
                }
            }
            dip_u = dip_u.max(max_t);
        }

        dip = dip.max(dip_u.max(dip_l));

        // without this guard the cycle can repeat forever
        if low == gcm[ig] && high == lcm[ih] {
            break;
        }
        low = gcm[ig];
        high = lcm[ih];
    }
    dip / (2 * n) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DipTest {
    pub dip: f64,
    pub p_value: f64,
    pub n: usize,
    pub replicates: usize,
}

impl DipTest {
    /// Reject unimodality at level 0.05.
    pub fn is_bimodal(&self) -> bool {
        self.p_value < 0.05
    }
}

/// Dip statistic plus Monte-Carlo p-value `(1 + #{null ≥ dip}) / (reps + 1)`
/// from `replicates` uniform samples of the same size.
pub fn dip_test(values: &[f64], replicates: usize, seed: u64, exec: Execution) -> DipTest {
    let n = values.len();
    let dip = dip_statistic(values);
    let null = exec.map_range(replicates, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(r as u64 + 1)));
        let mut u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        u.sort_by(f64::total_cmp);
        dip_sorted(&u)
    });
    let exceed = null.iter().filter(|&&d| d >= dip).count();
    DipTest {
        dip,
        p_value: (1 + exceed) as f64 / (replicates + 1) as f64,
        n,
        replicates,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values computed once with an independent C implementation
    // (the `diptest` Python package) on the exact inputs below.
    const NORMAL40: [f64; 40] = [
        -1.423825, 1.263728, -0.870662, -0.259173, -0.075343, -0.740885, -1.367793, 0.648893,
        0.361058, -1.952863, 2.34741, 0.968497, -0.759387, 0.902198, -0.466953, -0.06069, 0.788844,
        -1.256668, 0.575858, 1.398979, 1.322298, -0.299699, 0.902919, -1.621583, -0.158189,
        0.449484, -1.343601, -0.081688, 1.72474, 2.618159, 0.777361, 0.828633, -0.958988,
        -1.209388, -1.412292, 0.541547, 0.751939, -0.65876, -1.228675, 0.257558,
    ];
    const BIMODAL40: [f64; 40] = [
        -1.843549, -2.065406, -1.365008, -2.046481, -2.033075, -2.554107, -1.932022, -1.326461,
        -1.969428, -1.964543, -1.783173, -1.861258, -1.734874, -1.73164, -1.690825, -2.397509,
        -1.849985, -2.801351, -1.866601, -2.630812, 1.964365, 2.237025, 1.792573, 2.048858,
        1.179791, 1.571371, 2.344141, 1.422735, 2.325226, 1.30582, 1.546309, 1.452287, 2.003573,
        2.26718, 1.467096, 1.909264, 2.810976, 1.841304, 1.592093, 2.19329,
    ];
    const SKEW30: [f64; 30] = [
        1.044074, 0.265799, 0.381225, 0.789906, 0.175851, 0.283987, 0.388868, 0.210685, 0.95525,
        0.605975, 0.022568, 0.356131, 1.50837, 2.865679, 0.424387, 0.595436, 0.223505, 3.742125,
        0.309818, 0.132646, 0.222218, 0.611139, 0.482775, 0.638799, 0.727489, 1.901575, 1.290974,
        0.595432, 0.277623, 0.225198,
    ];
    const TRIMODAL60: [f64; 60] = [
        -2.891027, -2.860028, -4.059055, -3.511933, -3.764503, -3.531134, -3.128037, -3.507888,
        -3.947377, -4.392103, -4.487132, -4.015323, -3.305089, -3.819687, -3.968166, -3.845637,
        -3.978554, -3.671658, -4.673777, -5.185149, -0.25509, -0.689444, 0.969083, -0.095086,
        -0.151724, -0.922892, 0.169252, -0.374167, 0.673093, 0.504733, -0.465538, 0.24643,
        -1.63345, -0.403983, 0.747733, 0.474125, 0.105205, -0.017577, -0.851709, -0.81598,
        4.134047, 5.057068, 2.697466, 4.377093, 4.360718, 4.570455, 3.478452, 3.682596, 4.02741,
        3.383469, 3.262426, 3.469985, 3.957464, 4.224432, 3.985244, 4.046356, 3.589652, 3.567497,
        4.672374, 3.967112,
    ];

    #[test]
    fn matches_reference_values() {
        let cases: [(&[f64], f64); 4] = [
            (&NORMAL40, 0.05749541308210354),
            (&BIMODAL40, 0.15738273088475618),
            (&SKEW30, 0.06310731986393794),
            (&TRIMODAL60, 0.0892359061871043),
        ];
        for (xs, expected) in cases {
            let d = dip_statistic(xs);
            assert!((d - expected).abs() < 1e-12, "{d} vs {expected}");
        }
    }

    #[test]
    fn two_point_masses() {
        let xs: Vec<f64> = std::iter::repeat_n(0.0, 50)
            .chain(std::iter::repeat_n(1.0, 50))
            .collect();
        assert!((dip_statistic(&xs) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(dip_statistic(&[3.0; 10]), 0.05);
        assert_eq!(dip_statistic(&[1.0]), 0.5);
        let grid: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!((dip_statistic(&grid) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn p_values_separate_shapes() {
        let uni = dip_test(&NORMAL40, 2000, 1, Execution::Parallel);
        assert!(uni.p_value > 0.2, "{uni:?}");
        let bi = dip_test(&BIMODAL40, 2000, 1, Execution::Parallel);
        assert!(bi.p_value < 0.01 && bi.is_bimodal(), "{bi:?}");
        let seq = dip_test(&BIMODAL40, 200, 4, Execution::Sequential);
        let par = dip_test(&BIMODAL40, 200, 4, Execution::Parallel);
        assert_eq!(seq, par);
    }
}
