//! Exact reference implementation of the Euclidean Clifford algebra Cl(R^3).
//!
//! Multivectors are stored as 8 coefficients over the fixed basis
//! `[1, e1, e2, e3, e12, e13, e23, e123]`. The geometric product is driven by
//! a structure-constant table generated at compile time from `e_i^2 = +1` and
//! `e_i e_j = -e_j e_i`. The O(3) action ([`OrthogonalMap::apply`]) is the
//! outermorphism of a 3x3 orthogonal matrix and serves as the equivariance
//! oracle for every learned layer.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Number of basis blades in Cl(R^3).
pub const BLADES: usize = 8;

/// Grade of each basis index.
pub const GRADE_OF: [usize; BLADES] = [0, 1, 1, 1, 2, 2, 2, 3];

/// Basis indices belonging to each grade.
pub const GRADE_SLOTS: [&[usize]; 4] = [&[0], &[1, 2, 3], &[4, 5, 6], &[7]];

/// Human-readable basis names, in storage order.
pub const BASIS_NAMES: [&str; BLADES] = ["1", "e1", "e2", "e3", "e12", "e13", "e23", "e123"];

// Generator bitmask for each basis index (bit 0 = e1, bit 1 = e2, bit 2 = e3).
const BLADE_MASK: [u8; BLADES] = [0b000, 0b001, 0b010, 0b100, 0b011, 0b101, 0b110, 0b111];

const fn index_of_mask(mask: u8) -> usize {
    let mut i = 0;
    while i < BLADES {
        if BLADE_MASK[i] == mask {
            return i;
        }
        i += 1;
    }
    panic!("unknown blade mask");
}

// Sign picked up by moving the generators of `b` past those of `a` into
// canonical order. Shared generators square to +1 in this signature.
const fn reorder_sign(a: u8, b: u8) -> f64 {
    let mut a = a >> 1;
    let mut swaps = 0u32;
    while a != 0 {
        swaps += (a & b).count_ones();
        a >>= 1;
    }
    if swaps.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// One entry of the blade multiplication table: `e_i * e_j = sign * e_index`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BladeProduct {
    pub index: usize,
    pub sign: f64,
}

const fn build_table() -> [[BladeProduct; BLADES]; BLADES] {
    let mut table = [[BladeProduct { index: 0, sign: 0.0 }; BLADES]; BLADES];
    let mut i = 0;
    while i < BLADES {
        let mut j = 0;
        while j < BLADES {
            let (a, b) = (BLADE_MASK[i], BLADE_MASK[j]);
            table[i][j] = BladeProduct {
                index: index_of_mask(a ^ b),
                sign: reorder_sign(a, b),
            };
            j += 1;
        }
        i += 1;
    }
    table
}

/// Sparse form of the structure constants: every blade pair maps to exactly
/// one blade with sign +-1.
pub const PRODUCT_TABLE: [[BladeProduct; BLADES]; BLADES] = build_table();

/// Dense 8x8x8 structure constants `C[i][j][k]` with `e_i e_j = sum_k C[i][j][k] e_k`.
pub fn structure_constants() -> [[[f64; BLADES]; BLADES]; BLADES] {
    let mut c = [[[0.0; BLADES]; BLADES]; BLADES];
    for (i, row) in PRODUCT_TABLE.iter().enumerate() {
        for (j, p) in row.iter().enumerate() {
            c[i][j][p.index] = p.sign;
        }
    }
    c
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliffordError {
    #[error("grade_project: invalid grade {0}, expected 0..=3")]
    InvalidGrade(usize),
    #[error("apply_orthogonal: invalid orthogonal map: {0}")]
    InvalidMap(String),
}

/// A general element of Cl(R^3).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Multivector {
    pub coeffs: [f64; BLADES],
}

impl Multivector {
    pub const ZERO: Multivector = Multivector { coeffs: [0.0; BLADES] };

    pub fn new(coeffs: [f64; BLADES]) -> Self {
        Self { coeffs }
    }

    /// The unit basis blade at storage index `i`.
    pub fn basis(i: usize) -> Self {
        let mut coeffs = [0.0; BLADES];
        coeffs[i] = 1.0;
        Self { coeffs }
    }

    pub fn scalar(s: f64) -> Self {
        embed_scalar(s)
    }

    pub fn vector(x: [f64; 3]) -> Self {
        embed_vector(x)
    }

    pub fn geometric_product(&self, other: &Multivector) -> Multivector {
        geometric_product(self, other)
    }

    pub fn grade_project(&self, k: usize) -> Result<Multivector, CliffordError> {
        grade_project(self, k)
    }

    pub fn reverse(&self) -> Multivector {
        reverse(self)
    }

    pub fn bilinear(&self, other: &Multivector) -> f64 {
        bilinear_form(self, other)
    }

    pub fn quadratic(&self) -> f64 {
        quadratic_form(self)
    }

    /// Coefficient-wise dot product; equal to the bilinear form in this signature.
    pub fn coeff_dot(&self, other: &Multivector) -> f64 {
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Multivector) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for Multivector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (c, name) in self.coeffs.iter().zip(BASIS_NAMES) {
            if *c == 0.0 {
                continue;
            }
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            if name == "1" {
                write!(f, "{c}")?;
            } else {
                write!(f, "{c}*{name}")?;
            }
        }
        if first {
            write!(f, "0")?;
        }
        Ok(())
    }
}

impl Add for Multivector {
    type Output = Multivector;
    fn add(mut self, rhs: Multivector) -> Multivector {
        self += rhs;
        self
    }
}

impl AddAssign for Multivector {
    fn add_assign(&mut self, rhs: Multivector) {
        for (a, b) in self.coeffs.iter_mut().zip(rhs.coeffs) {
            *a += b;
        }
    }
}

impl Sub for Multivector {
    type Output = Multivector;
    fn sub(mut self, rhs: Multivector) -> Multivector {
        for (a, b) in self.coeffs.iter_mut().zip(rhs.coeffs) {
            *a -= b;
        }
        self
    }
}

impl Neg for Multivector {
    type Output = Multivector;
    fn neg(self) -> Multivector {
        self * -1.0
    }
}

impl Mul<f64> for Multivector {
    type Output = Multivector;
    fn mul(mut self, rhs: f64) -> Multivector {
        for a in &mut self.coeffs {
            *a *= rhs;
        }
        self
    }
}

impl Mul for Multivector {
    type Output = Multivector;
    fn mul(self, rhs: Multivector) -> Multivector {
        geometric_product(&self, &rhs)
    }
}

/// The geometric product `a * b`.
pub fn geometric_product(a: &Multivector, b: &Multivector) -> Multivector {
    let mut out = [0.0; BLADES];
    for (i, &ai) in a.coeffs.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        for (j, &bj) in b.coeffs.iter().enumerate() {
            let p = PRODUCT_TABLE[i][j];
            out[p.index] += p.sign * ai * bj;
        }
    }
    Multivector { coeffs: out }
}

pub fn grade_project(v: &Multivector, k: usize) -> Result<Multivector, CliffordError> {
    if k > 3 {
        return Err(CliffordError::InvalidGrade(k));
    }
    let mut out = Multivector::ZERO;
    for &i in GRADE_SLOTS[k] {
        out.coeffs[i] = v.coeffs[i];
    }
    Ok(out)
}

/// Reversion: the grade-k part is scaled by `(-1)^(k(k-1)/2)`.
pub fn reverse(v: &Multivector) -> Multivector {
    let mut out = *v;
    for (c, &g) in out.coeffs.iter_mut().zip(&GRADE_OF) {
        if g >= 2 {
            *c = -*c;
        }
    }
    out
}

/// Extended bilinear form: the scalar part of `reverse(v) * w`.
pub fn bilinear_form(v: &Multivector, w: &Multivector) -> f64 {
    let r = reverse(v);
    // Only the grade-0 coefficient is needed, i.e. pairs with e_i e_j ∝ 1.
    let mut s = 0.0;
    for i in 0..BLADES {
        let p = PRODUCT_TABLE[i][i];
        debug_assert_eq!(p.index, 0);
        s += p.sign * r.coeffs[i] * w.coeffs[i];
    }
    debug_assert!((s - v.coeff_dot(w)).abs() <= 1e-12 * (1.0 + s.abs()));
    s
}

pub fn quadratic_form(v: &Multivector) -> f64 {
    bilinear_form(v, v)
}

pub fn embed_vector(x: [f64; 3]) -> Multivector {
    let mut out = Multivector::ZERO;
    out.coeffs[1..4].copy_from_slice(&x);
    out
}

pub fn embed_scalar(s: f64) -> Multivector {
    let mut out = Multivector::ZERO;
    out.coeffs[0] = s;
    out
}

pub fn extract_vector(v: &Multivector) -> [f64; 3] {
    [v.coeffs[1], v.coeffs[2], v.coeffs[3]]
}

pub fn extract_scalar(v: &Multivector) -> f64 {
    v.coeffs[0]
}

/// An element of O(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrthogonalMap {
    matrix: [[f64; 3]; 3],
    det_sign: i8,
}

const ORTHO_TOL: f64 = 1e-12;

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl OrthogonalMap {
    /// Validates `matrix^T matrix = I` and `|det| = 1` within 1e-12.
    pub fn new(matrix: [[f64; 3]; 3]) -> Result<Self, CliffordError> {
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| matrix[k][i] * matrix[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if !dot.is_finite() || (dot - want).abs() > ORTHO_TOL {
                    return Err(CliffordError::InvalidMap(format!(
                        "(R^T R)[{i}][{j}] = {dot}, expected {want}"
                    )));
                }
            }
        }
        let det = det3(&matrix);
        let det_sign = if det > 0.0 { 1 } else { -1 };
        if (det - det_sign as f64).abs() > ORTHO_TOL {
            return Err(CliffordError::InvalidMap(format!("det = {det}")));
        }
        Ok(Self { matrix, det_sign })
    }

    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            det_sign: 1,
        }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.matrix
    }

    pub fn det_sign(&self) -> i8 {
        self.det_sign
    }

    pub fn apply_vector(&self, x: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[0][0] * x[0] + m[0][1] * x[1] + m[0][2] * x[2],
            m[1][0] * x[0] + m[1][1] * x[1] + m[1][2] * x[2],
            m[2][0] * x[0] + m[2][1] * x[1] + m[2][2] * x[2],
        ]
    }

    /// The 8x8 matrix of the induced algebra automorphism; column `k` is the
    /// image of basis blade `k`.
    pub fn outermorphism(&self) -> [[f64; BLADES]; BLADES] {
        let col = |c: usize| embed_vector([self.matrix[0][c], self.matrix[1][c], self.matrix[2][c]]);
        let gens = [col(0), col(1), col(2)];
        let mut out = [[0.0; BLADES]; BLADES];
        for (k, &mask) in BLADE_MASK.iter().enumerate() {
            let mut img = Multivector::scalar(1.0);
            for (g, gen) in gens.iter().enumerate() {
                if mask & (1 << g) != 0 {
                    img = img * *gen;
                }
            }
            for r in 0..BLADES {
                out[r][k] = img.coeffs[r];
            }
        }
        out
    }

    pub fn apply(&self, v: &Multivector) -> Multivector {
        apply_outermorphism(&self.outermorphism(), v)
    }
}

/// Applies a precomputed [`OrthogonalMap::outermorphism`] matrix.
pub fn apply_outermorphism(rho: &[[f64; BLADES]; BLADES], v: &Multivector) -> Multivector {
    let mut out = [0.0; BLADES];
    for (r, row) in rho.iter().enumerate() {
        out[r] = row.iter().zip(&v.coeffs).map(|(a, b)| a * b).sum();
    }
    Multivector { coeffs: out }
}

/// Applies `R` to `v`. Re-validates the map so hand-built values are caught.
pub fn apply_orthogonal(r: &OrthogonalMap, v: &Multivector) -> Result<Multivector, CliffordError> {
    let checked = OrthogonalMap::new(r.matrix)?;
    if checked.det_sign != r.det_sign {
        return Err(CliffordError::InvalidMap(format!(
            "det_sign {} disagrees with determinant",
            r.det_sign
        )));
    }
    Ok(r.apply(v))
}

/// Deterministic random element of O(3) with the requested determinant sign.
pub fn random_orthogonal(seed: u64, det_sign: i8) -> OrthogonalMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut cols = [[0.0f64; 3]; 3];
        for col in &mut cols {
            for x in col.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
        }
        // Modified Gram-Schmidt on the columns.
        let mut ok = true;
        for i in 0..3 {
            for j in 0..i {
                let d: f64 = (0..3).map(|k| cols[i][k] * cols[j][k]).sum();
                for k in 0..3 {
                    cols[i][k] -= d * cols[j][k];
                }
            }
            let n = cols[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-6 {
                ok = false;
                break;
            }
            for x in &mut cols[i] {
                *x /= n;
            }
        }
        if !ok {
            continue;
        }
        let mut m = [[0.0; 3]; 3];
        for (c, col) in cols.iter().enumerate() {
            for r in 0..3 {
                m[r][c] = col[r];
            }
        }
        let det = det3(&m);
        if (det > 0.0) != (det_sign > 0) {
            for row in &mut m {
                row[2] = -row[2];
            }
        }
        if let Ok(map) = OrthogonalMap::new(m) {
            return map;
        }
    }
}
