use super::{FeatureDump, ProbeError};

/// Threshold on `|γ_cls − γ_dom|` for a well-disentangled model.
pub const DEFAULT_TAU: f64 = 0.05;

/// Mean cosine similarities over same-class cross-domain pairs (`cls`),
/// same-domain cross-class pairs (`dom`) and cross-class cross-domain
/// pairs (`all`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gamma {
    pub cls: f64,
    pub dom: f64,
    pub all: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaReport {
    pub gamma: Gamma,
    pub tau: f64,
    pub disentangled: bool,
}

/// Exhaustive over all unordered pairs.
pub fn gamma_metrics(dump: &FeatureDump) -> Result<Gamma, ProbeError> {
    let unit = dump.unit_rows()?;
    let d = dump.dim();
    let n = dump.len();
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for i in 0..n {
        let a = &unit[i * d..][..d];
        for j in i + 1..n {
            let same_class = dump.class_labels[i] == dump.class_labels[j];
            let same_domain = dump.domain_labels[i] == dump.domain_labels[j];
            let slot = match (same_class, same_domain) {
                (true, false) => 0,
                (false, true) => 1,
                (false, false) => 2,
                (true, true) => continue,
            };
            let b = &unit[j * d..][..d];
            sums[slot] += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            counts[slot] += 1;
        }
    }
    let names = ["gamma_cls", "gamma_dom", "gamma_all"];
    let mut means = [0.0; 3];
    for k in 0..3 {
        if counts[k] == 0 {
            return Err(ProbeError::NoValidPairs(names[k]));
        }
        means[k] = sums[k] / counts[k] as f64;
    }
    Ok(Gamma {
        cls: means[0],
        dom: means[1],
        all: means[2],
    })
}

/// Both intra-factor similarities exceed the cross-factor one and differ
/// from each other by less than `tau`.
pub fn check_criterion(gamma: Gamma, tau: f64) -> Result<GammaReport, ProbeError> {
    if !(tau > 0.0) {
        return Err(ProbeError::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let disentangled = gamma.cls > gamma.all && gamma.dom > gamma.all && (gamma.cls - gamma.dom).abs() < tau;
    Ok(GammaReport {
        gamma,
        tau,
        disentangled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(cls: f64, dom: f64, all: f64) -> Gamma {
        Gamma { cls, dom, all }
    }

    #[test]
    fn criterion_cases() {
        assert!(check_criterion(g(0.81, 0.78, 0.71), 0.05).unwrap().disentangled);
        assert!(!check_criterion(g(0.84, 0.74, 0.73), 0.05).unwrap().disentangled);
        assert!(!check_criterion(g(0.5, 0.5, 0.6), 0.05).unwrap().disentangled);
        assert!(check_criterion(g(0.5, 0.5, 0.4), 0.0).is_err());
    }

    #[test]
    fn identical_features_give_unit_similarity() {
        let dump = FeatureDump::from_rows(vec![0.3, -1.0, 2.0].repeat(4), 3, vec![0, 0, 1, 1], vec![0, 1, 0, 1]).unwrap();
        let m = gamma_metrics(&dump).unwrap();
        for v in [m.cls, m.dom, m.all] {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_pairs_are_reported() {
        let dump = FeatureDump::from_rows(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 1], vec![0, 0]).unwrap();
        assert!(matches!(gamma_metrics(&dump), Err(ProbeError::NoValidPairs("gamma_cls"))));
    }
}
