use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Choices and covariates for `N` individuals, each observed on `T` occasions
/// choosing among `K` alternatives.
///
/// Covariates are stored flat in `(n, t, k, j)` order. Choices are 0-based
/// internally; the CSV format uses 1-based alternatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    n_individuals: usize,
    n_occasions: usize,
    n_alternatives: usize,
    p_beta: usize,
    p_alpha: usize,
    choices: Vec<usize>,
    x_fixed: Vec<f64>,
    x_random: Vec<f64>,
    // covariates differenced against the chosen alternative, rows k != y in
    // ascending k
    dx: Vec<f64>,
    dz: Vec<f64>,
    // content hash per individual, used to key approximation orderings
    keys: Vec<u64>,
}

impl PanelDataset {
    /// `choices[n * T + t]` is the 0-based chosen alternative; `x_fixed` has
    /// length `N*T*K*p_beta` and `x_random` length `N*T*K*p_alpha`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_individuals: usize,
        n_occasions: usize,
        n_alternatives: usize,
        p_beta: usize,
        p_alpha: usize,
        choices: Vec<usize>,
        x_fixed: Vec<f64>,
        x_random: Vec<f64>,
    ) -> Result<Self> {
        if n_individuals == 0 {
            return Err(Error::InvalidData("no individuals".into()));
        }
        if n_occasions < 2 {
            return Err(Error::InvalidData(format!(
                "pairwise likelihood needs at least two occasions, got {n_occasions}"
            )));
        }
        if n_alternatives < 2 {
            return Err(Error::InvalidData("need at least two alternatives".into()));
        }
        let cells = n_individuals * n_occasions;
        check_len("choices", cells, choices.len())?;
        check_len("x_fixed", cells * n_alternatives * p_beta, x_fixed.len())?;
        check_len("x_random", cells * n_alternatives * p_alpha, x_random.len())?;
        if let Some((i, y)) = choices.iter().enumerate().find(|(_, &y)| y >= n_alternatives) {
            return Err(Error::InvalidData(format!(
                "choice {} out of range 1..{} at individual {}, occasion {}",
                y + 1,
                n_alternatives,
                i / n_occasions + 1,
                i % n_occasions + 1
            )));
        }
        if x_fixed.iter().chain(&x_random).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite covariate".into()));
        }
        let mut data = Self {
            n_individuals,
            n_occasions,
            n_alternatives,
            p_beta,
            p_alpha,
            choices,
            x_fixed,
            x_random,
            dx: Vec::new(),
            dz: Vec::new(),
            keys: Vec::new(),
        };
        data.dx = data.difference(&data.x_fixed, p_beta);
        data.dz = data.difference(&data.x_random, p_alpha);
        data.keys = (0..n_individuals).map(|n| data.content_key(n)).collect();
        Ok(data)
    }

    fn content_key(&self, n: usize) -> u64 {
        const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = FNV_OFFSET;
        let mut eat = |v: u64| {
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(FNV_PRIME);
            }
        };
        let (t, k) = (self.n_occasions, self.n_alternatives);
        for &y in &self.choices[n * t..(n + 1) * t] {
            eat(y as u64);
        }
        let (fp, rp) = (t * k * self.p_beta, t * k * self.p_alpha);
        for v in &self.x_fixed[n * fp..(n + 1) * fp] {
            eat(v.to_bits());
        }
        for v in &self.x_random[n * rp..(n + 1) * rp] {
            eat(v.to_bits());
        }
        h
    }

    /// Hash of individual `n`'s choices and covariates. Identical records
    /// share a key wherever they appear in the dataset.
    pub fn individual_key(&self, n: usize) -> u64 {
        self.keys[n]
    }

    /// Order-independent hash of the whole dataset.
    pub fn fingerprint(&self) -> u64 {
        let mut h = (self.n_occasions as u64) << 48 ^ (self.n_alternatives as u64) << 32 ^ (self.p_beta as u64) << 16 ^ self.p_alpha as u64;
        for &k in &self.keys {
            let mut z = k.wrapping_add(0x9e37_79b9_7f4a_7c15);
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            h = h.wrapping_add(z ^ (z >> 31));
        }
        h
    }

    fn difference(&self, x: &[f64], p: usize) -> Vec<f64> {
        let k = self.n_alternatives;
        let mut out = Vec::with_capacity(self.n_individuals * self.n_occasions * (k - 1) * p);
        for cell in 0..self.n_individuals * self.n_occasions {
            let y = self.choices[cell];
            let base = cell * k * p;
            let chosen = &x[base + y * p..base + (y + 1) * p];
            for alt in (0..k).filter(|&a| a != y) {
                let row = &x[base + alt * p..base + (alt + 1) * p];
                out.extend(row.iter().zip(chosen).map(|(a, c)| a - c));
            }
        }
        out
    }

    pub fn n_individuals(&self) -> usize {
        self.n_individuals
    }
    pub fn n_occasions(&self) -> usize {
        self.n_occasions
    }
    pub fn n_alternatives(&self) -> usize {
        self.n_alternatives
    }
    pub fn p_beta(&self) -> usize {
        self.p_beta
    }
    pub fn p_alpha(&self) -> usize {
        self.p_alpha
    }

    /// Number of unordered occasion pairs per individual.
    pub fn n_pairs(&self) -> usize {
        self.n_occasions * (self.n_occasions - 1) / 2
    }

    /// 0-based chosen alternative.
    pub fn choice(&self, n: usize, t: usize) -> usize {
        self.choices[n * self.n_occasions + t]
    }

    pub fn choices(&self) -> &[usize] {
        &self.choices
    }

    pub fn x_fixed(&self, n: usize, t: usize, k: usize) -> &[f64] {
        let p = self.p_beta;
        let i = ((n * self.n_occasions + t) * self.n_alternatives + k) * p;
        &self.x_fixed[i..i + p]
    }

    pub fn x_random(&self, n: usize, t: usize, k: usize) -> &[f64] {
        let q = self.p_alpha;
        let i = ((n * self.n_occasions + t) * self.n_alternatives + k) * q;
        &self.x_random[i..i + q]
    }

    /// Fixed-coefficient covariates differenced against the chosen
    /// alternative: `(K-1) x p_beta`, row-major.
    pub(crate) fn diff_fixed(&self, n: usize, t: usize) -> &[f64] {
        let len = (self.n_alternatives - 1) * self.p_beta;
        let i = (n * self.n_occasions + t) * len;
        &self.dx[i..i + len]
    }

    pub(crate) fn diff_random(&self, n: usize, t: usize) -> &[f64] {
        let len = (self.n_alternatives - 1) * self.p_alpha;
        let i = (n * self.n_occasions + t) * len;
        &self.dz[i..i + len]
    }

    /// Dataset restricted to the given individuals, in the given order.
    pub fn select(&self, individuals: &[usize]) -> Result<Self> {
        let (t, k) = (self.n_occasions, self.n_alternatives);
        let mut choices = Vec::new();
        let mut xf = Vec::new();
        let mut xr = Vec::new();
        for &n in individuals {
            if n >= self.n_individuals {
                return Err(Error::InvalidArgument(format!("individual {n} out of range")));
            }
            choices.extend_from_slice(&self.choices[n * t..(n + 1) * t]);
            let (fp, rp) = (t * k * self.p_beta, t * k * self.p_alpha);
            xf.extend_from_slice(&self.x_fixed[n * fp..(n + 1) * fp]);
            xr.extend_from_slice(&self.x_random[n * rp..(n + 1) * rp]);
        }
        Self::new(individuals.len(), t, k, self.p_beta, self.p_alpha, choices, xf, xr)
    }

    /// Long-format CSV: `individual,occasion,alternative,chosen,x1..xp,z1..zq`
    /// with 1-based identifiers.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["individual".to_string(), "occasion".into(), "alternative".into(), "chosen".into()];
        header.extend((1..=self.p_beta).map(|j| format!("x{j}")));
        header.extend((1..=self.p_alpha).map(|j| format!("z{j}")));
        wr.write_record(&header)?;
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for n in 0..self.n_individuals {
            for t in 0..self.n_occasions {
                let y = self.choice(n, t);
                for k in 0..self.n_alternatives {
                    rec.clear();
                    rec.push((n + 1).to_string());
                    rec.push((t + 1).to_string());
                    rec.push((k + 1).to_string());
                    rec.push(((k == y) as u8).to_string());
                    rec.extend(self.x_fixed(n, t, k).iter().map(|v| format!("{v:?}")));
                    rec.extend(self.x_random(n, t, k).iter().map(|v| format!("{v:?}")));
                    wr.write_record(&rec)?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let fixed = ["individual", "occasion", "alternative", "chosen"];
        for (i, name) in fixed.iter().enumerate() {
            if header.get(i).map(str::trim) != Some(*name) {
                return Err(Error::InvalidData(format!("column {} must be `{name}`", i + 1)));
            }
        }
        let (mut p, mut q) = (0usize, 0usize);
        for (i, col) in header.iter().enumerate().skip(4) {
            let col = col.trim();
            if col == format!("x{}", p + 1) && q == 0 {
                p += 1;
            } else if col == format!("z{}", q + 1) {
                q += 1;
            } else {
                return Err(Error::InvalidData(format!("unexpected column `{col}` at position {}", i + 1)));
            }
        }

        // (individual, occasion) -> alternative -> (chosen, covariates)
        type Cell = BTreeMap<i64, (bool, Vec<f64>)>;
        let mut rows: BTreeMap<i64, BTreeMap<i64, Cell>> = BTreeMap::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let lineno = line + 2;
            let int = |i: usize| -> Result<i64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<i64>().ok())
                    .ok_or_else(|| Error::InvalidData(format!("line {lineno}: bad integer in column {}", i + 1)))
            };
            let (ind, occ, alt, chosen) = (int(0)?, int(1)?, int(2)?, int(3)?);
            if chosen != 0 && chosen != 1 {
                return Err(Error::InvalidData(format!("line {lineno}: chosen must be 0 or 1")));
            }
            let mut x = Vec::with_capacity(p + q);
            for i in 4..4 + p + q {
                let v = rec
                    .get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidData(format!("line {lineno}: bad number in column {}", i + 1)))?;
                x.push(v);
            }
            let cell = rows.entry(ind).or_default().entry(occ).or_default();
            if cell.insert(alt, (chosen == 1, x)).is_some() {
                return Err(Error::InvalidData(format!(
                    "line {lineno}: duplicate row for individual {ind}, occasion {occ}, alternative {alt}"
                )));
            }
        }
        let n_ind = rows.len();
        let first = rows.values().next().ok_or_else(|| Error::InvalidData("empty dataset".into()))?;
        let t_occ = first.len();
        let k_alt = first.values().next().map(|c| c.len()).unwrap_or(0);
        let mut choices = Vec::with_capacity(n_ind * t_occ);
        let mut xf = Vec::new();
        let mut xr = Vec::new();
        for (ind, occs) in &rows {
            if occs.len() != t_occ {
                return Err(Error::InvalidData(format!(
                    "individual {ind} has {} occasions, expected {t_occ}",
                    occs.len()
                )));
            }
            for (occ, alts) in occs {
                let keys: Vec<i64> = alts.keys().copied().collect();
                if keys != (1..=k_alt as i64).collect::<Vec<_>>() {
                    return Err(Error::InvalidData(format!(
                        "individual {ind}, occasion {occ}: alternatives must be 1..{k_alt}"
                    )));
                }
                let chosen: Vec<usize> = alts.values().enumerate().filter(|(_, c)| c.0).map(|(k, _)| k).collect();
                if chosen.len() != 1 {
                    return Err(Error::InvalidData(format!(
                        "individual {ind}, occasion {occ}: exactly one alternative must be chosen"
                    )));
                }
                choices.push(chosen[0]);
                for (_, x) in alts.values() {
                    xf.extend_from_slice(&x[..p]);
                    xr.extend_from_slice(&x[p..]);
                }
            }
        }
        Self::new(n_ind, t_occ, k_alt, p, q, choices, xf, xr)
    }
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what: what.into(),
            expected,
            got,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PanelDataset {
        // N=2, T=2, K=3, one fixed and one random covariate
        let choices = vec![0, 2, 1, 1];
        let xf: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let xr: Vec<f64> = (0..12).map(|i| -(i as f64)).collect();
        PanelDataset::new(2, 2, 3, 1, 1, choices, xf, xr).unwrap()
    }

    #[test]
    fn differences_against_chosen() {
        let d = tiny();
        // individual 0, occasion 1 chose alternative 2: x = (1.5, 2.0, 2.5)
        assert_eq!(d.diff_fixed(0, 1), &[-1.0, -0.5]);
        assert_eq!(d.diff_random(0, 1), &[2.0, 1.0]);
    }

    #[test]
    fn csv_round_trip() {
        let d = tiny();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("individual,occasion,alternative,chosen,x1,z1\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 2 * 3);
        let back = PanelDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(PanelDataset::new(1, 1, 3, 0, 0, vec![0], vec![], vec![]).is_err());
        assert!(PanelDataset::new(1, 2, 3, 0, 0, vec![0, 3], vec![], vec![]).is_err());
        let two_chosen = "individual,occasion,alternative,chosen,x1\n1,1,1,1,0\n1,1,2,1,0\n1,2,1,1,0\n1,2,2,0,0\n";
        assert!(PanelDataset::read_csv(two_chosen.as_bytes()).is_err());
        let bad_col = "individual,occasion,alternative,chosen,w1\n";
        assert!(PanelDataset::read_csv(bad_col.as_bytes()).is_err());
    }

    #[test]
    fn select_reorders_individuals() {
        let d = tiny();
        let s = d.select(&[1, 0]).unwrap();
        assert_eq!(s.choice(0, 0), d.choice(1, 0));
        assert_eq!(s.x_random(1, 1, 2), d.x_random(0, 1, 2));
    }
}
