//! Small numerical helpers shared across modules.

/// Pairwise (tree) summation in a fixed order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Derivative at 0 of a vector-valued `f(h)` by Ridders' polynomial
/// extrapolation of central differences, starting from step `h`.
///
/// Returns the derivative and an error estimate (sup-norm).
pub fn ridders_derivative(f: impl Fn(f64) -> Vec<f64>, h: f64) -> (Vec<f64>, f64) {
    const CON: f64 = 1.4;
    const CON2: f64 = CON * CON;
    const NTAB: usize = 10;
    const SAFE: f64 = 2.0;

    let central = |h: f64| -> Vec<f64> {
        let p = f(h);
        let m = f(-h);
        p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    };
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
    };

    let mut table: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); NTAB]; NTAB];
    let mut hh = h;
    table[0][0] = central(hh);
    let mut best = table[0][0].clone();
    let mut err = f64::INFINITY;
    for i in 1..NTAB {
        hh /= CON;
        table[0][i] = central(hh);
        let mut fac = CON2;
        for j in 1..=i {
            let next: Vec<f64> = table[j - 1][i]
                .iter()
                .zip(&table[j - 1][i - 1])
                .map(|(a, b)| (a * fac - b) / (fac - 1.0))
                .collect();
            fac *= CON2;
            let errt = dist(&next, &table[j - 1][i]).max(dist(&next, &table[j - 1][i - 1]));
            if errt <= err {
                err = errt;
                best = next.clone();
            }
            table[j][i] = next;
        }
        if dist(&table[i][i], &table[i - 1][i - 1]) >= SAFE * err {
            break;
        }
    }
    (best, err)
}
