use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::sym::SymMatrix;
use crate::{Error, Result};

/// Required sign of an affine matrix expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    NegativeDefinite,
    PositiveDefinite,
}

/// Contribution `L Y R' + R Y L'` of the symmetric matrix variable `Y`.
///
/// `left` and `right` have as many rows as the constraint's order and as
/// many columns as `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixTerm {
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
}

/// `F(Y, x) = F0 + sum_k x_k F_k + sum_t (L_t Y R_t' + R_t Y L_t')`
/// required to be negative or positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLmiConstraint {
    pub name: String,
    pub constant: SymMatrix,
    pub scalar_terms: BTreeMap<usize, SymMatrix>,
    pub matrix_terms: Vec<MatrixTerm>,
    pub sense: Sense,
    /// Strict constraints are enforced with the program's strictness margin;
    /// non-strict ones only up to the interior of the cone.
    pub strict: bool,
}

impl AffineLmiConstraint {
    pub fn order(&self) -> usize {
        self.constant.order()
    }

    /// `constant > 0` (or `< 0`) with no decision variables attached yet.
    pub fn new(name: impl Into<String>, constant: SymMatrix, sense: Sense) -> Self {
        Self {
            name: name.into(),
            constant,
            scalar_terms: BTreeMap::new(),
            matrix_terms: Vec::new(),
            sense,
            strict: true,
        }
    }

    pub fn non_strict(mut self) -> Self {
        self.strict = false;
        self
    }

    pub fn with_scalar(mut self, var: usize, coefficient: SymMatrix) -> Self {
        self.add_scalar(var, &coefficient);
        self
    }

    pub fn add_scalar(&mut self, var: usize, coefficient: &SymMatrix) {
        assert_eq!(coefficient.order(), self.order(), "scalar block order");
        self.scalar_terms
            .entry(var)
            .or_insert_with(|| SymMatrix::zeros(coefficient.order()))
            .add_scaled(coefficient, 1.0);
    }

    pub fn with_matrix_term(mut self, left: DMatrix<f64>, right: DMatrix<f64>) -> Self {
        self.matrix_terms.push(MatrixTerm { left, right });
        self
    }

    pub fn matrix_variable_order(&self) -> Option<usize> {
        self.matrix_terms.first().map(|t| t.left.ncols())
    }
}

/// Block-structured construction of an [`AffineLmiConstraint`].
#[derive(Debug, Clone)]
pub struct BlockLmiBuilder {
    offsets: Vec<usize>,
    sizes: Vec<usize>,
    order: usize,
    y_order: usize,
    constant: DMatrix<f64>,
    scalar: BTreeMap<usize, DMatrix<f64>>,
    terms: Vec<MatrixTerm>,
}

impl BlockLmiBuilder {
    pub fn new(block_sizes: &[usize], y_order: usize) -> Self {
        let mut offsets = Vec::with_capacity(block_sizes.len());
        let mut acc = 0;
        for &s in block_sizes {
            offsets.push(acc);
            acc += s;
        }
        Self {
            offsets,
            sizes: block_sizes.to_vec(),
            order: acc,
            y_order,
            constant: DMatrix::zeros(acc, acc),
            scalar: BTreeMap::new(),
            terms: Vec::new(),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn place(&self, target: &mut DMatrix<f64>, bi: usize, bj: usize, m: &DMatrix<f64>) {
        assert_eq!(m.shape(), (self.sizes[bi], self.sizes[bj]), "block ({bi},{bj}) shape");
        let (r, c) = (self.offsets[bi], self.offsets[bj]);
        let mut v = target.view_mut((r, c), m.shape());
        v += m;
        if bi != bj {
            let mut v = target.view_mut((c, r), (m.ncols(), m.nrows()));
            v += m.transpose();
        }
    }

    /// Adds `m` at block `(bi, bj)` and `m'` at `(bj, bi)`.
    pub fn constant(&mut self, bi: usize, bj: usize, m: &DMatrix<f64>) -> &mut Self {
        let mut c = std::mem::replace(&mut self.constant, DMatrix::zeros(0, 0));
        self.place(&mut c, bi, bj, m);
        self.constant = c;
        self
    }

    /// Adds `x_var * m` at block `(bi, bj)` (and its transpose).
    pub fn scalar(&mut self, var: usize, bi: usize, bj: usize, m: &DMatrix<f64>) -> &mut Self {
        let mut c = self
            .scalar
            .remove(&var)
            .unwrap_or_else(|| DMatrix::zeros(self.order, self.order));
        self.place(&mut c, bi, bj, m);
        self.scalar.insert(var, c);
        self
    }

    /// Adds `left * Y * right'` at block `(bi, bj)` together with its transpose.
    ///
    /// On a diagonal block (`bi == bj`) this contributes `left Y right' + right Y left'`.
    pub fn product(&mut self, bi: usize, left: &DMatrix<f64>, bj: usize, right: &DMatrix<f64>) -> &mut Self {
        assert_eq!(left.shape(), (self.sizes[bi], self.y_order), "left factor shape");
        assert_eq!(right.shape(), (self.sizes[bj], self.y_order), "right factor shape");
        let mut l = DMatrix::zeros(self.order, self.y_order);
        l.view_mut((self.offsets[bi], 0), left.shape()).copy_from(left);
        let mut r = DMatrix::zeros(self.order, self.y_order);
        r.view_mut((self.offsets[bj], 0), right.shape()).copy_from(right);
        self.terms.push(MatrixTerm { left: l, right: r });
        self
    }

    pub fn build(&self, name: impl Into<String>, sense: Sense) -> AffineLmiConstraint {
        AffineLmiConstraint {
            name: name.into(),
            constant: SymMatrix::from_dmatrix(&self.constant),
            scalar_terms: self
                .scalar
                .iter()
                .map(|(&k, m)| (k, SymMatrix::from_dmatrix(m)))
                .collect(),
            matrix_terms: self.terms.clone(),
            sense,
            strict: true,
        }
    }
}

/// Linear objective over the scalar variables subject to affine LMIs in one
/// symmetric matrix variable `Y` and the scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiProgram {
    /// Order of `Y`; zero when the program has no matrix variable.
    pub matrix_order: usize,
    pub scalar_names: Vec<String>,
    /// Minimised objective, one coefficient per scalar variable.
    pub objective: Vec<f64>,
    pub constraints: Vec<AffineLmiConstraint>,
    /// Strict constraints are imposed as `<= -eps I` (resp. `>= eps I`).
    pub strictness_margin: f64,
}

impl LmiProgram {
    pub fn new(matrix_order: usize, strictness_margin: f64) -> Self {
        Self {
            matrix_order,
            scalar_names: Vec::new(),
            objective: Vec::new(),
            constraints: Vec::new(),
            strictness_margin,
        }
    }

    /// Declares a scalar variable and returns its index.
    pub fn add_scalar(&mut self, name: impl Into<String>) -> usize {
        self.scalar_names.push(name.into());
        self.objective.push(0.0);
        self.scalar_names.len() - 1
    }

    pub fn scalar_index(&self, name: &str) -> Option<usize> {
        self.scalar_names.iter().position(|n| n == name)
    }

    pub fn set_objective(&mut self, var: usize, coefficient: f64) {
        self.objective[var] = coefficient;
    }

    pub fn push(&mut self, c: AffineLmiConstraint) {
        self.constraints.push(c);
    }

    pub fn scalar_count(&self) -> usize {
        self.scalar_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.objective.len() != self.scalar_names.len() {
            return Err(Error::dims("objective", self.scalar_names.len(), self.objective.len()));
        }
        if !(self.strictness_margin >= 0.0 && self.strictness_margin.is_finite()) {
            return Err(Error::NumericalBreakdown("strictness margin must be finite and nonnegative".into()));
        }
        for c in &self.constraints {
            validate_constraint(c, self.matrix_order, self.scalar_count())?;
        }
        Ok(())
    }
}

fn validate_constraint(c: &AffineLmiConstraint, y_order: usize, scalars: usize) -> Result<()> {
    let order = c.order();
    for (&k, m) in &c.scalar_terms {
        if k >= scalars {
            return Err(Error::dims(format!("constraint `{}` scalar index", c.name), format!("< {scalars}"), k));
        }
        if m.order() != order {
            return Err(Error::dims(format!("constraint `{}` scalar block", c.name), order, m.order()));
        }
    }
    for t in &c.matrix_terms {
        let expected = (order, y_order);
        if t.left.shape() != expected || t.right.shape() != expected {
            return Err(Error::dims(
                format!("constraint `{}` matrix term", c.name),
                format!("{expected:?}"),
                format!("{:?}/{:?}", t.left.shape(), t.right.shape()),
            ));
        }
    }
    Ok(())
}

/// Values of all decision variables.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiPoint {
    pub y: SymMatrix,
    pub scalars: Vec<f64>,
}

/// Assembled constraint matrix and its extreme eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintValue {
    pub matrix: SymMatrix,
    /// Largest eigenvalue for `< 0`, smallest for `> 0`.
    pub extreme_eigenvalue: f64,
    /// Eigenvalue in `< 0` orientation: negative iff the constraint holds.
    pub violation: f64,
}

/// Evaluates `F(Y, x)` by direct matrix products.
pub fn evaluate_constraint(c: &AffineLmiConstraint, point: &LmiPoint) -> Result<ConstraintValue> {
    let order = c.order();
    let y = point.y.to_dmatrix();
    let mut f = c.constant.to_dmatrix();
    for (&k, m) in &c.scalar_terms {
        let x = *point
            .scalars
            .get(k)
            .ok_or_else(|| Error::dims(format!("assignment for `{}`", c.name), format!("> {k} scalars"), point.scalars.len()))?;
        f += m.to_dmatrix() * x;
    }
    for t in &c.matrix_terms {
        if t.left.ncols() != y.nrows() || t.left.nrows() != order {
            return Err(Error::dims(format!("Y for `{}`", c.name), t.left.ncols(), y.nrows()));
        }
        let lyr = &t.left * &y * t.right.transpose();
        f += &lyr + lyr.transpose();
    }
    let matrix = SymMatrix::from_dmatrix(&f);
    let (extreme_eigenvalue, violation) = match c.sense {
        Sense::NegativeDefinite => {
            let v = matrix.max_eigenvalue();
            (v, v)
        }
        Sense::PositiveDefinite => {
            let v = matrix.min_eigenvalue();
            (v, -v)
        }
    };
    Ok(ConstraintValue {
        matrix,
        extreme_eigenvalue,
        violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_bound_evaluation() {
        let c = AffineLmiConstraint::new("x - 2 > 0", SymMatrix::from_diagonal(&[-2.0]), Sense::PositiveDefinite)
            .with_scalar(0, SymMatrix::identity(1));
        let v = evaluate_constraint(
            &c,
            &LmiPoint {
                y: SymMatrix::zeros(0),
                scalars: vec![3.0],
            },
        )
        .unwrap();
        assert_eq!(v.matrix.get(0, 0), 1.0);
        assert_eq!(v.extreme_eigenvalue, 1.0);
        assert_eq!(v.violation, -1.0);
    }

    #[test]
    fn missing_scalar_is_dimension_mismatch() {
        let c = AffineLmiConstraint::new("c", SymMatrix::identity(1), Sense::PositiveDefinite)
            .with_scalar(2, SymMatrix::identity(1));
        let p = LmiPoint {
            y: SymMatrix::zeros(0),
            scalars: vec![1.0],
        };
        assert!(matches!(evaluate_constraint(&c, &p), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn builder_places_products_and_transposes() {
        // [[A Y + Y A', Y C'], [C Y, -1]] with A = diag(-1, -2), C = [1, 0].
        let a = DMatrix::from_diagonal(&nalgebra::dvector![-1.0, -2.0]);
        let cm = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let mut b = BlockLmiBuilder::new(&[2, 1], 2);
        b.product(0, &a, 0, &DMatrix::identity(2, 2))
            .product(1, &cm, 0, &DMatrix::identity(2, 2))
            .constant(1, 1, &DMatrix::from_element(1, 1, -1.0));
        let c = b.build("lyap", Sense::NegativeDefinite);
        let y = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let v = evaluate_constraint(
            &c,
            &LmiPoint {
                y: SymMatrix::from_dmatrix(&y),
                scalars: vec![],
            },
        )
        .unwrap();
        let ay = &a * &y;
        let expected_00 = &ay + ay.transpose();
        let m = v.matrix.to_dmatrix();
        assert_eq!(m.view((0, 0), (2, 2)).clone_owned(), expected_00);
        assert_eq!(m.view((2, 0), (1, 2)).clone_owned(), &cm * &y);
        assert_eq!(m.view((0, 2), (2, 1)).clone_owned(), (&cm * &y).transpose());
        assert_eq!(m[(2, 2)], -1.0);
    }

    #[test]
    fn validation_catches_bad_indices() {
        let mut p = LmiProgram::new(0, 1e-6);
        let x = p.add_scalar("x");
        p.push(AffineLmiConstraint::new("c", SymMatrix::identity(1), Sense::PositiveDefinite).with_scalar(x + 1, SymMatrix::identity(1)));
        assert!(p.validate().is_err());
    }
}
