//! Composite Simpson rule.

/// Integrates `f` over `[a, b]` with `panels` Simpson panels; each panel
/// uses its two endpoints and midpoint, so `2 * panels + 1` evaluations.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    assert!(panels > 0, "simpson needs at least one panel");
    if a == b {
        return 0.0;
    }
    let h = (b - a) / panels as f64;
    let mut ends = f(a) + f(b);
    let mut mids = 0.0;
    for i in 0..panels {
        let x = a + i as f64 * h;
        if i > 0 {
            ends += 2.0 * f(x);
        }
        mids += f(x + 0.5 * h);
    }
    h / 6.0 * (ends + 4.0 * mids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_cubics() {
        let v = simpson(|x| x * x * x - 2.0 * x + 1.0, 0.0, 2.0, 1);
        assert!((v - 2.0).abs() < 1e-14);
    }

    #[test]
    fn empty_interval() {
        assert_eq!(simpson(|x| x.exp(), 0.3, 0.3, 16), 0.0);
    }

    #[test]
    fn converges_on_smooth_integrand() {
        let exact = 1.0 - (-1.0f64).exp();
        let coarse = (simpson(|x| (-x).exp(), 0.0, 1.0, 4) - exact).abs();
        let fine = (simpson(|x| (-x).exp(), 0.0, 1.0, 8) - exact).abs();
        // fourth-order rule: halving h cuts the error ~16x
        assert!(coarse / fine > 14.0 && coarse / fine < 18.0);
    }
}
