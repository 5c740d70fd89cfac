//! Banded Gaussian elimination with partial pivoting.

/// Square matrix with `kl` sub- and `ku` super-diagonals. Rows keep `kl`
/// extra columns on the right for pivoting fill-in.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        BandMatrix {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku);
        i * self.width + (j + self.kl - i)
    }

    pub fn in_band(&self, i: usize, j: usize) -> bool {
        j + self.kl >= i && j <= i + self.ku
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "entry ({i}, {j}) outside band");
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl >= i && j <= i + self.kl + self.ku {
            self.data[self.slot(i, j)]
        } else {
            0.0
        }
    }

    /// Solves `A x = rhs` in place, consuming the factorization workspace.
    /// Returns `None` on a zero pivot.
    pub fn solve(mut self, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
        let n = self.n;
        let reach = self.kl + self.ku;
        for k in 0..n {
            let last_row = (k + self.kl).min(n - 1);
            let mut piv = k;
            let mut best = self.get(k, k).abs();
            for i in k + 1..=last_row {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    piv = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return None;
            }
            let last_col = (k + reach).min(n - 1);
            if piv != k {
                for j in k..=last_col {
                    let (a, b) = (self.slot(k, j), self.slot(piv, j));
                    self.data.swap(a, b);
                }
                rhs.swap(k, piv);
            }
            let pivot = self.get(k, k);
            for i in k + 1..=last_row {
                let factor = self.get(i, k) / pivot;
                if factor == 0.0 {
                    continue;
                }
                let s = self.slot(i, k);
                self.data[s] = 0.0;
                for j in k + 1..=last_col {
                    let upper = self.get(k, j);
                    if upper != 0.0 {
                        let s = self.slot(i, j);
                        self.data[s] -= factor * upper;
                    }
                }
                rhs[i] -= factor * rhs[k];
            }
        }
        let mut x = rhs;
        for k in (0..n).rev() {
            let last_col = (k + reach).min(n - 1);
            let mut acc = x[k];
            for j in k + 1..=last_col {
                acc -= self.get(k, j) * x[j];
            }
            x[k] = acc / self.get(k, k);
        }
        Some(x)
    }
}
