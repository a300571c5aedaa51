//! Dense f64 vector/matrix arithmetic, activations, softmax, and a seeded
//! deterministic RNG. Everything here is pure: operands are never mutated by
//! the free functions, and shape violations abort with a message naming both
//! shapes involved.

/// A dense vector of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector { data: vec![0.0; len] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Index of the largest element, ties broken by the lowest index.
    pub fn argmax(&self) -> usize {
        assert!(!self.data.is_empty(), "argmax of empty vector");
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Euclidean norm squared.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Vector) {
        assert_eq!(
            self.len(),
            other.len(),
            "vector add_assign length mismatch: {} vs {}",
            self.len(),
            other.len()
        );
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// In-place `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Vector, scale: f64) {
        assert_eq!(
            self.len(),
            other.len(),
            "vector add_scaled length mismatch: {} vs {}",
            self.len(),
            other.len()
        );
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale_in_place(&mut self, scale: f64) {
        for a in self.data.iter_mut() {
            *a *= scale;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// A row-major dense matrix of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            assert_eq!(row.len(), c, "ragged matrix rows: {} vs {}", row.len(), c);
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Copy of column `j` as a vector.
    pub fn column(&self, j: usize) -> Vector {
        assert!(j < self.cols, "column {} out of range for {}x{}", j, self.rows, self.cols);
        let mut out = Vector::zeros(self.rows);
        for i in 0..self.rows {
            out[i] = self.data[i * self.cols + j];
        }
        out
    }

    /// In-place `column(j) += scale * v`.
    pub fn column_add_scaled(&mut self, j: usize, v: &Vector, scale: f64) {
        assert!(j < self.cols, "column {} out of range for {}x{}", j, self.rows, self.cols);
        assert_eq!(v.len(), self.rows, "column length mismatch: {} vs {}", v.len(), self.rows);
        for i in 0..self.rows {
            self.data[i * self.cols + j] += scale * v[i];
        }
    }

    /// In-place rank-one update `self += u * v^T`.
    pub fn add_outer(&mut self, u: &Vector, v: &Vector) {
        assert_eq!(
            (self.rows, self.cols),
            (u.len(), v.len()),
            "outer product shape mismatch: {}x{} += {}x{}",
            self.rows,
            self.cols,
            u.len(),
            v.len()
        );
        for i in 0..self.rows {
            let ui = u[i];
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (m, vj) in row.iter_mut().zip(v.iter()) {
                *m += ui * vj;
            }
        }
    }

    /// In-place `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "matrix add_assign shape mismatch: {}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, scale: f64) {
        for a in self.data.iter_mut() {
            *a *= scale;
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Matrix-vector product `m * v`.
pub fn matvec(m: &Matrix, v: &Vector) -> Vector {
    assert_eq!(
        m.cols,
        v.len(),
        "matvec shape mismatch: matrix {}x{} times vector of length {}",
        m.rows,
        m.cols,
        v.len()
    );
    let mut out = Vector::zeros(m.rows);
    for i in 0..m.rows {
        let row = &m.data[i * m.cols..(i + 1) * m.cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(v.iter()) {
            acc += a * b;
        }
        out[i] = acc;
    }
    out
}

/// Transposed matrix-vector product `m^T * v`.
pub fn matvec_t(m: &Matrix, v: &Vector) -> Vector {
    assert_eq!(
        m.rows,
        v.len(),
        "matvec_t shape mismatch: matrix {}x{} transposed times vector of length {}",
        m.rows,
        m.cols,
        v.len()
    );
    let mut out = Vector::zeros(m.cols);
    for i in 0..m.rows {
        let vi = v[i];
        let row = &m.data[i * m.cols..(i + 1) * m.cols];
        for (o, a) in out.as_mut_slice().iter_mut().zip(row.iter()) {
            *o += vi * a;
        }
    }
    out
}

fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Elementwise logistic sigmoid.
pub fn sigmoid(v: &Vector) -> Vector {
    Vector::from_vec(v.iter().map(|&x| sigmoid_scalar(x)).collect())
}

/// Elementwise tanh.
pub fn tanh(v: &Vector) -> Vector {
    Vector::from_vec(v.iter().map(|&x| x.tanh()).collect())
}

/// Elementwise product `a ⊙ b`.
pub fn hadamard(a: &Vector, b: &Vector) -> Vector {
    assert_eq!(
        a.len(),
        b.len(),
        "hadamard length mismatch: {} vs {}",
        a.len(),
        b.len()
    );
    Vector::from_vec(a.iter().zip(b.iter()).map(|(x, y)| x * y).collect())
}

/// Elementwise sum `a + b`.
pub fn add(a: &Vector, b: &Vector) -> Vector {
    assert_eq!(
        a.len(),
        b.len(),
        "add length mismatch: {} vs {}",
        a.len(),
        b.len()
    );
    Vector::from_vec(a.iter().zip(b.iter()).map(|(x, y)| x + y).collect())
}

/// Numerically safe softmax: the maximum is subtracted before
/// exponentiation so large logits cannot overflow.
pub fn softmax(v: &Vector) -> Vector {
    assert!(!v.is_empty(), "softmax of empty vector");
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Vector::from_vec(exps.into_iter().map(|e| e / sum).collect())
}

/// Deterministic xorshift64* generator.
///
/// The state transition is fixed and documented so that draw sequences can be
/// reproduced exactly in any language:
///
/// ```text
/// state ^= state >> 12
/// state ^= state << 25
/// state ^= state >> 27
/// output = state * 0x2545F4914F6CDD1D   (wrapping, 64-bit)
/// ```
///
/// The seed is first mixed through one round of splitmix64
/// (`z = seed + 0x9E3779B97F4A7C15; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9;
/// z = (z ^ z>>27) * 0x94D049BB133111EB; z ^= z>>31`), and a zero state is
/// replaced by the splitmix64 increment so the generator never sticks.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        if z == 0 {
            z = 0x9E37_79B9_7F4A_7C15;
        }
        Rng { state: z }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut s = self.state;
        s ^= s >> 12;
        s ^= s << 25;
        s ^= s >> 27;
        self.state = s;
        s.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. Takes `next_u64() % n`; the modulo bias is
    /// negligible for the small ranges used here.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        (self.next_u64() % n as u64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Matrix with entries drawn i.i.d. uniform in `[-scale, +scale]`,
/// deterministic given the generator state.
pub fn init_uniform(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    assert!(rows > 0 && cols > 0, "init_uniform dims must be positive: {}x{}", rows, cols);
    assert!(scale > 0.0, "init_uniform scale must be positive: {}", scale);
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = rng.uniform(-scale, scale);
    }
    m
}

/// Vector with entries drawn i.i.d. uniform in `[-scale, +scale]`.
pub fn init_uniform_vec(rng: &mut Rng, len: usize, scale: f64) -> Vector {
    assert!(len > 0, "init_uniform_vec length must be positive");
    assert!(scale > 0.0, "init_uniform_vec scale must be positive: {}", scale);
    let mut v = Vector::zeros(len);
    for x in v.as_mut_slice().iter_mut() {
        *x = rng.uniform(-scale, scale);
    }
    v
}
