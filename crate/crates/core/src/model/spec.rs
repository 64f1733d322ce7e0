use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One entry of the lower-triangular Cholesky factor of the random-effect
/// covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CholeskyEntry {
    Free,
    Fixed(f64),
}

/// Coordinates pinned to given values during estimation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Restriction {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Restriction {
    pub fn new(indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::DimensionMismatch {
                what: "restriction values".into(),
                expected: indices.len(),
                got: values.len(),
            });
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != indices.len() {
            return Err(Error::InvalidArgument("restriction indices repeat".into()));
        }
        Ok(Self { indices, values })
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Overwrite the restricted coordinates of `theta`.
    pub fn apply(&self, theta: &mut [f64]) {
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            theta[i] = v;
        }
    }
}

/// A member of the mixed probit family: which coefficients are fixed or
/// random, the pattern of the Cholesky factor, the error variance and the
/// tested block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub p_beta: usize,
    pub p_alpha: usize,
    /// Lower triangle of `L`, row-major: (0,0), (1,0), (1,1), (2,0), ...
    pub omega_pattern: Vec<CholeskyEntry>,
    pub sigma_diag: f64,
    /// Packed-vector positions of the tested block, 0-based.
    pub gamma_indices: Vec<usize>,
    pub gamma0: Vec<f64>,
    /// Subset of `gamma_indices` pinned at their `gamma0` values in this
    /// candidate model.
    #[serde(default)]
    pub pinned: Vec<usize>,
}

#[inline]
pub(crate) fn tri_index(row: usize, col: usize) -> usize {
    row * (row + 1) / 2 + col
}

impl ModelSpec {
    pub fn new(
        p_beta: usize,
        p_alpha: usize,
        omega_pattern: Vec<CholeskyEntry>,
        sigma_diag: f64,
        gamma_indices: Vec<usize>,
        gamma0: Vec<f64>,
    ) -> Result<Self> {
        let spec = Self {
            p_beta,
            p_alpha,
            omega_pattern,
            sigma_diag,
            gamma_indices,
            gamma0,
            pinned: Vec::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Diagonal `L` with free diagonal entries.
    pub fn diagonal_pattern(q: usize) -> Vec<CholeskyEntry> {
        let mut pat = vec![CholeskyEntry::Fixed(0.0); q * (q + 1) / 2];
        for i in 0..q {
            pat[tri_index(i, i)] = CholeskyEntry::Free;
        }
        pat
    }

    pub fn full_pattern(q: usize) -> Vec<CholeskyEntry> {
        vec![CholeskyEntry::Free; q * (q + 1) / 2]
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.p_alpha;
        if self.omega_pattern.len() != q * (q + 1) / 2 {
            return Err(Error::DimensionMismatch {
                what: "omega pattern".into(),
                expected: q * (q + 1) / 2,
                got: self.omega_pattern.len(),
            });
        }
        if !(self.sigma_diag > 0.0 && self.sigma_diag.is_finite()) {
            return Err(Error::InvalidSpec(format!("sigma_diag must be positive, got {}", self.sigma_diag)));
        }
        for i in 0..q {
            if let CholeskyEntry::Fixed(v) = self.omega_pattern[tri_index(i, i)] {
                if !(v > 0.0) {
                    return Err(Error::InvalidSpec(format!(
                        "fixed diagonal entry L[{},{}] must be positive, got {v}",
                        i + 1,
                        i + 1
                    )));
                }
            }
        }
        for e in &self.omega_pattern {
            if let CholeskyEntry::Fixed(v) = e {
                if !v.is_finite() {
                    return Err(Error::InvalidSpec("non-finite fixed Cholesky entry".into()));
                }
            }
        }
        let d = self.dim();
        if self.gamma0.len() != self.gamma_indices.len() {
            return Err(Error::DimensionMismatch {
                what: "gamma0".into(),
                expected: self.gamma_indices.len(),
                got: self.gamma0.len(),
            });
        }
        let mut seen = vec![false; d];
        for &g in &self.gamma_indices {
            if g >= d {
                return Err(Error::InvalidSpec(format!("gamma index {g} outside 0..{d}")));
            }
            if seen[g] {
                return Err(Error::InvalidSpec(format!("gamma index {g} repeated")));
            }
            seen[g] = true;
        }
        for &p in &self.pinned {
            if !self.gamma_indices.contains(&p) {
                return Err(Error::InvalidSpec(format!("pinned coordinate {p} is not in the gamma block")));
            }
        }
        Ok(())
    }

    pub fn n_free_l(&self) -> usize {
        self.omega_pattern.iter().filter(|e| matches!(e, CholeskyEntry::Free)).count()
    }

    /// Length of the packed parameter vector.
    pub fn dim(&self) -> usize {
        self.p_beta + self.n_free_l()
    }

    /// `(row, col)` of each free Cholesky entry in packing order.
    pub fn free_l_positions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.p_alpha {
            for c in 0..=r {
                if matches!(self.omega_pattern[tri_index(r, c)], CholeskyEntry::Free) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Coordinate names: `beta_1..beta_p`, then `L_rc` (1-based) for free
    /// Cholesky entries.
    pub fn layout(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.p_beta).map(|j| format!("beta_{j}")).collect();
        names.extend(self.free_l_positions().into_iter().map(|(r, c)| format!("L_{}{}", r + 1, c + 1)));
        names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layout().iter().position(|n| n == name)
    }

    /// Pin values for the pinned coordinates.
    pub fn restriction(&self) -> Restriction {
        let values = self
            .pinned
            .iter()
            .map(|p| {
                let k = self.gamma_indices.iter().position(|g| g == p).unwrap();
                self.gamma0[k]
            })
            .collect();
        Restriction {
            indices: self.pinned.clone(),
            values,
        }
    }

    /// Same model with every gamma coordinate pinned.
    pub fn narrow(&self) -> Self {
        Self {
            pinned: self.gamma_indices.clone(),
            ..self.clone()
        }
    }

    pub fn wide(&self) -> Self {
        Self {
            pinned: Vec::new(),
            ..self.clone()
        }
    }

    pub fn with_pinned(&self, pinned: Vec<usize>) -> Result<Self> {
        let s = Self { pinned, ..self.clone() };
        s.validate()?;
        Ok(s)
    }

    /// Same family and parameterization; pinning may differ.
    pub fn same_family(&self, other: &Self) -> bool {
        self.p_beta == other.p_beta
            && self.p_alpha == other.p_alpha
            && self.omega_pattern == other.omega_pattern
            && self.sigma_diag == other.sigma_diag
            && self.gamma_indices == other.gamma_indices
            && self.gamma0 == other.gamma0
    }

    /// Starting point for real data: `beta = 0`, free diagonal of `L` at one,
    /// other free entries at zero.
    pub fn heuristic_start(&self) -> Theta {
        let mut values = vec![0.0; self.p_beta];
        values.extend(self.free_l_positions().into_iter().map(|(r, c)| if r == c { 1.0 } else { 0.0 }));
        let mut theta = Theta::new(values, self);
        self.restriction().apply(&mut theta.values);
        theta
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SpecFile = toml::from_str(text)?;
        file.into_spec()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let layout = self.layout();
        let mut fixed = Vec::new();
        for r in 0..self.p_alpha {
            for c in 0..=r {
                if let CholeskyEntry::Fixed(v) = self.omega_pattern[tri_index(r, c)] {
                    fixed.push(FixedEntry {
                        row: r + 1,
                        col: c + 1,
                        value: v,
                    });
                }
            }
        }
        let file = SpecFile {
            p_beta: self.p_beta,
            p_alpha: self.p_alpha,
            sigma_diag: self.sigma_diag,
            omega: OmegaShape::Full,
            omega_fixed: fixed,
            gamma: self.gamma_indices.iter().map(|&i| layout[i].clone()).collect(),
            gamma0: self.gamma0.clone(),
            pinned: self.pinned.iter().map(|&i| layout[i].clone()).collect(),
        };
        toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum OmegaShape {
    Diagonal,
    Full,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixedEntry {
    row: usize,
    col: usize,
    value: f64,
}

/// On-disk model specification (TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    p_beta: usize,
    p_alpha: usize,
    sigma_diag: f64,
    omega: OmegaShape,
    #[serde(default)]
    omega_fixed: Vec<FixedEntry>,
    #[serde(default)]
    gamma: Vec<String>,
    #[serde(default)]
    gamma0: Vec<f64>,
    #[serde(default)]
    pinned: Vec<String>,
}

impl SpecFile {
    fn into_spec(self) -> Result<ModelSpec> {
        let q = self.p_alpha;
        let mut pattern = match self.omega {
            OmegaShape::Diagonal => ModelSpec::diagonal_pattern(q),
            OmegaShape::Full => ModelSpec::full_pattern(q),
            OmegaShape::None => {
                let mut p = vec![CholeskyEntry::Fixed(0.0); q * (q + 1) / 2];
                for i in 0..q {
                    p[tri_index(i, i)] = CholeskyEntry::Fixed(1.0);
                }
                p
            }
        };
        for e in &self.omega_fixed {
            if e.row == 0 || e.col == 0 || e.col > e.row || e.row > q {
                return Err(Error::InvalidSpec(format!(
                    "omega_fixed entry ({}, {}) is not in the 1-based lower triangle of a {q}x{q} factor",
                    e.row, e.col
                )));
            }
            pattern[tri_index(e.row - 1, e.col - 1)] = CholeskyEntry::Fixed(e.value);
        }
        let mut spec = ModelSpec {
            p_beta: self.p_beta,
            p_alpha: q,
            omega_pattern: pattern,
            sigma_diag: self.sigma_diag,
            gamma_indices: Vec::new(),
            gamma0: Vec::new(),
            pinned: Vec::new(),
        };
        let lookup = |name: &str, field: &str| {
            spec.index_of(name)
                .ok_or_else(|| Error::InvalidSpec(format!("{field}: unknown coordinate `{name}`")))
        };
        let gamma = self.gamma.iter().map(|n| lookup(n, "gamma")).collect::<Result<Vec<_>>>()?;
        let pinned = self.pinned.iter().map(|n| lookup(n, "pinned")).collect::<Result<Vec<_>>>()?;
        let gamma0 = if self.gamma0.is_empty() {
            vec![0.0; gamma.len()]
        } else {
            self.gamma0
        };
        spec.gamma_indices = gamma;
        spec.gamma0 = gamma0;
        spec.pinned = pinned;
        spec.validate()?;
        Ok(spec)
    }
}

/// Packed parameter vector with coordinate names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl Theta {
    pub fn new(values: Vec<f64>, spec: &ModelSpec) -> Self {
        Self {
            names: spec.layout(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.values.len() != spec.dim() {
            return Err(Error::DimensionMismatch {
                what: "theta".into(),
                expected: spec.dim(),
                got: self.values.len(),
            });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("theta".into()));
        }
        Ok(())
    }
}

/// Pack `beta` and the Cholesky factor `l` into the free-coordinate vector.
pub fn pack(beta: &[f64], l: &DMatrix<f64>, spec: &ModelSpec) -> Result<Theta> {
    spec.validate()?;
    if beta.len() != spec.p_beta {
        return Err(Error::DimensionMismatch {
            what: "beta".into(),
            expected: spec.p_beta,
            got: beta.len(),
        });
    }
    let q = spec.p_alpha;
    if l.nrows() != q || l.ncols() != q {
        return Err(Error::DimensionMismatch {
            what: "Cholesky factor".into(),
            expected: q,
            got: l.nrows(),
        });
    }
    let mut values = beta.to_vec();
    for r in 0..q {
        for c in 0..q {
            let v = l[(r, c)];
            if c > r {
                if v != 0.0 {
                    return Err(Error::FixedEntryViolation {
                        row: r,
                        col: c,
                        expected: 0.0,
                        got: v,
                    });
                }
                continue;
            }
            match spec.omega_pattern[tri_index(r, c)] {
                CholeskyEntry::Free => values.push(v),
                CholeskyEntry::Fixed(f) => {
                    if v != f {
                        return Err(Error::FixedEntryViolation {
                            row: r,
                            col: c,
                            expected: f,
                            got: v,
                        });
                    }
                }
            }
        }
    }
    Ok(Theta::new(values, spec))
}

/// Split a packed vector into `beta` and the lower-triangular factor `L`.
pub fn unpack(theta: &[f64], spec: &ModelSpec) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if theta.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            what: "theta".into(),
            expected: spec.dim(),
            got: theta.len(),
        });
    }
    let q = spec.p_alpha;
    let beta = theta[..spec.p_beta].to_vec();
    let mut l = DMatrix::zeros(q, q);
    let mut it = theta[spec.p_beta..].iter();
    for r in 0..q {
        for c in 0..=r {
            l[(r, c)] = match spec.omega_pattern[tri_index(r, c)] {
                CholeskyEntry::Free => *it.next().unwrap(),
                CholeskyEntry::Fixed(f) => f,
            };
        }
    }
    Ok((beta, l))
}

/// Random-effect covariance `L L'`.
pub fn omega(theta: &[f64], spec: &ModelSpec) -> Result<DMatrix<f64>> {
    let (_, l) = unpack(theta, spec)?;
    Ok(&l * l.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn varsel_like(p_beta: usize) -> ModelSpec {
        ModelSpec::new(p_beta, 4, ModelSpec::diagonal_pattern(4), 0.5, vec![], vec![]).unwrap()
    }

    #[test]
    fn diagonal_pack_length() {
        let spec = varsel_like(4);
        let l = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            2f64.sqrt(),
            1.5f64.sqrt(),
            1.0,
            1.2f64.sqrt(),
        ]));
        let theta = pack(&[1.5, -1.0, 2.0, 1.0], &l, &spec).unwrap();
        assert_eq!(theta.len(), 8);
        assert_eq!(theta.names[4], "L_11");
        assert_eq!(theta.names[7], "L_44");
        let om = omega(&theta.values, &spec).unwrap();
        assert!((om[(0, 0)] - 2.0).abs() < 1e-15 && (om[(3, 3)] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn all_fixed_keeps_only_beta() {
        let mut pat = vec![CholeskyEntry::Fixed(0.0); 6];
        for i in 0..3 {
            pat[tri_index(i, i)] = CholeskyEntry::Fixed(1.0);
        }
        let spec = ModelSpec::new(2, 3, pat, 0.5, vec![], vec![]).unwrap();
        let theta = pack(&[0.3, 0.4], &DMatrix::identity(3, 3), &spec).unwrap();
        assert_eq!(theta.values, vec![0.3, 0.4]);
    }

    #[test]
    fn fixed_entry_violation_and_dimension_errors() {
        let spec = varsel_like(2);
        let mut l = DMatrix::identity(4, 4);
        l[(2, 1)] = 0.3;
        assert!(matches!(pack(&[0.0, 0.0], &l, &spec), Err(Error::FixedEntryViolation { row: 2, col: 1, .. })));
        assert!(matches!(
            pack(&[0.0], &DMatrix::identity(4, 4), &spec),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn invalid_specs() {
        let mut pat = ModelSpec::full_pattern(2);
        pat[0] = CholeskyEntry::Fixed(0.0);
        assert!(ModelSpec::new(1, 2, pat, 0.5, vec![], vec![]).is_err());
        assert!(ModelSpec::new(1, 2, ModelSpec::full_pattern(2), 0.0, vec![], vec![]).is_err());
        assert!(ModelSpec::new(1, 2, ModelSpec::full_pattern(2), 0.5, vec![4], vec![0.0]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
            p_beta = 5
            p_alpha = 4
            sigma_diag = 0.5
            omega = "diagonal"
            gamma = ["beta_5"]
            gamma0 = [0.0]
            pinned = ["beta_5"]
        "#;
        let spec = ModelSpec::from_toml_str(text).unwrap();
        assert_eq!(spec.dim(), 9);
        assert_eq!(spec.gamma_indices, vec![4]);
        assert_eq!(spec.restriction().indices, vec![4]);
        let back = ModelSpec::from_toml_str(&spec.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, spec);
        let bad = text.replace("beta_5\"]\n            gamma0", "beta_9\"]\n            gamma0");
        assert!(ModelSpec::from_toml_str(&bad).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(
            vals in proptest::collection::vec(-3.0f64..3.0, 14),
            mask in proptest::collection::vec(any::<bool>(), 10),
        ) {
            let q = 4;
            let mut pat = ModelSpec::full_pattern(q);
            for (k, m) in mask.iter().enumerate() {
                if *m {
                    pat[k] = CholeskyEntry::Fixed(vals[4 + k].abs() + 0.1);
                }
            }
            let spec = ModelSpec::new(4, q, pat, 0.5, vec![], vec![]).unwrap();
            let mut l = DMatrix::zeros(q, q);
            for r in 0..q {
                for c in 0..=r {
                    l[(r, c)] = match spec.omega_pattern[tri_index(r, c)] {
                        CholeskyEntry::Free => vals[4 + tri_index(r, c)],
                        CholeskyEntry::Fixed(f) => f,
                    };
                }
            }
            let theta = pack(&vals[..4], &l, &spec).unwrap();
            let (b, l2) = unpack(&theta.values, &spec).unwrap();
            prop_assert_eq!(&b[..], &vals[..4]);
            prop_assert_eq!(l2, l);
            let again = pack(&b, &unpack(&theta.values, &spec).unwrap().1, &spec).unwrap();
            prop_assert_eq!(again.values, theta.values);
        }
    }
}
