//! Reference computations shared by the integration tests.
#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::ToPrimitive;

/// Pearson statistic of a 2x2 table in exact rational arithmetic.
pub fn exact_statistic(wm: (u64, u64), null: (u64, u64)) -> BigRational {
    let big = |v: u64| BigInt::from(v);
    let (a, b, c, d) = (big(wm.0), big(wm.1), big(null.0), big(null.1));
    let n = &a + &b + &c + &d;
    let det = &a * &d - &b * &c;
    let denom = (&a + &b) * (&c + &d) * (&a + &c) * (&b + &d);
    BigRational::new(n * &det * &det, denom)
}

fn ln_gamma_half() -> f64 {
    0.5 * std::f64::consts::PI.ln()
}

/// Regularized upper incomplete gamma `Q(1/2, z)` by series below `z = 1.5`
/// and a modified-Lentz continued fraction above.
pub fn q_half(z: f64) -> f64 {
    let a = 0.5;
    if z <= 0.0 {
        return 1.0;
    }
    let prefactor = (-z + a * z.ln() - ln_gamma_half()).exp();
    if z < 1.5 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut n = 1.0;
        while term.abs() > sum.abs() * 1e-17 {
            term *= z / (a + n);
            sum += term;
            n += 1.0;
        }
        1.0 - prefactor * sum
    } else {
        let tiny = 1e-300;
        let mut b = z + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-17 {
                break;
            }
        }
        prefactor * h
    }
}

/// Upper-tail chi-square(1) probability of the exact statistic.
pub fn reference_p(wm: (u64, u64), null: (u64, u64)) -> f64 {
    if wm.0 + null.0 == 0 || wm.1 + null.1 == 0 {
        return 1.0;
    }
    let stat = exact_statistic(wm, null).to_f64().unwrap();
    q_half(stat / 2.0)
}

/// Every contiguous window of the integers in `text`, by brute force.
pub fn brute_force_contains(codes: &[u32], text: &str) -> bool {
    let mut ints = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().chain(std::iter::once(' ')) {
        if ch.is_ascii_digit() {
            cur.push(ch);
        } else if !cur.is_empty() {
            ints.push(cur.parse::<u128>().unwrap_or(u128::MAX));
            cur.clear();
        }
    }
    (0..ints.len()).any(|s| {
        s + codes.len() <= ints.len()
            && !codes.is_empty()
            && codes
                .iter()
                .enumerate()
                .all(|(j, &c)| ints[s + j] == c as u128)
    })
}
