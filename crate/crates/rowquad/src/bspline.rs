//! Univariate B-spline bases and their tensor products.
//!
//! Every basis lives on the parametric interval [0, 1] and is described by an
//! open knot vector: the two boundary knots repeated `p + 1` times, every
//! interior breakpoint exactly once. Interior knots of multiplicity one give
//! the maximal smoothness C^{p-1}, which is what the quadrature and assembly
//! layers assume. Evaluation uses the standard triangular recursion; values at
//! a knot are right-limits, except at `x = 1` where the left-limit is taken so
//! the last function evaluates to one.
//!
//! All indices are 0-based: functions `0..num_functions()`, spans
//! `0..num_spans()`.

use std::ops::Range;

use thiserror::Error;

/// Knot-vector construction failures.
#[derive(Debug, Error)]
pub enum KnotError {
    #[error("degree must be at least 1")]
    DegreeZero,
    #[error("need at least 2 breakpoints, got {0}")]
    TooFewBreakpoints(usize),
    #[error("breakpoints must be strictly increasing (violation near index {0})")]
    NotIncreasing(usize),
    #[error("parametric domain must be [0, 1], got [{0}, {1}]")]
    DomainNotUnit(f64, f64),
    #[error("knot vector is not open of degree {degree}: boundary knot multiplicity must be {}", degree + 1)]
    NotOpen { degree: usize },
    #[error("interior knot at index {0} has multiplicity > 1; only maximal smoothness is supported")]
    InteriorMultiplicity(usize),
}

/// Degree-p spline basis on an open knot vector over [0, 1].
#[derive(Debug, Clone)]
pub struct KnotVector {
    degree: usize,
    knots: Vec<f64>,
    breakpoints: Vec<f64>,
}

/// Nonzero basis functions at one evaluation point: `values[k]` and
/// `derivs[k]` belong to function `first + k`, for `k` in `0..=p`.
#[derive(Debug, Clone)]
pub struct LocalBasis {
    pub first: usize,
    pub values: Vec<f64>,
    pub derivs: Vec<f64>,
}

impl KnotVector {
    /// Open knot vector with `n_el` equal spans on [0, 1].
    pub fn open_uniform(degree: usize, n_el: usize) -> Result<Self, KnotError> {
        if n_el == 0 {
            return Err(KnotError::TooFewBreakpoints(1));
        }
        let breakpoints: Vec<f64> = (0..=n_el).map(|k| k as f64 / n_el as f64).collect();
        Self::from_breakpoints(degree, &breakpoints)
    }

    /// Open knot vector over the given strictly increasing breakpoints,
    /// which must start at 0 and end at 1.
    pub fn from_breakpoints(degree: usize, breakpoints: &[f64]) -> Result<Self, KnotError> {
        if degree == 0 {
            return Err(KnotError::DegreeZero);
        }
        if breakpoints.len() < 2 {
            return Err(KnotError::TooFewBreakpoints(breakpoints.len()));
        }
        for k in 1..breakpoints.len() {
            if breakpoints[k] <= breakpoints[k - 1] {
                return Err(KnotError::NotIncreasing(k));
            }
        }
        let (lo, hi) = (breakpoints[0], *breakpoints.last().unwrap());
        if lo != 0.0 || hi != 1.0 {
            return Err(KnotError::DomainNotUnit(lo, hi));
        }
        let mut knots = Vec::with_capacity(breakpoints.len() + 2 * degree);
        knots.extend(std::iter::repeat(0.0).take(degree));
        knots.extend_from_slice(breakpoints);
        knots.extend(std::iter::repeat(1.0).take(degree));
        Ok(Self {
            degree,
            knots,
            breakpoints: breakpoints.to_vec(),
        })
    }

    /// Validates an explicit knot list (as read from a geometry file).
    pub fn from_knots(degree: usize, knots: Vec<f64>) -> Result<Self, KnotError> {
        if degree == 0 {
            return Err(KnotError::DegreeZero);
        }
        if knots.len() < 2 * (degree + 1) {
            return Err(KnotError::NotOpen { degree });
        }
        let m = knots.len();
        let open_front = knots[..=degree].iter().all(|&k| k == knots[0]);
        let open_back = knots[m - 1 - degree..].iter().all(|&k| k == knots[m - 1]);
        if !open_front || !open_back || knots[degree + 1] == knots[0] || knots[m - 2 - degree] == knots[m - 1] {
            return Err(KnotError::NotOpen { degree });
        }
        let mut breakpoints = vec![knots[0]];
        for (idx, w) in knots.windows(2).enumerate().take(m - degree - 1).skip(degree) {
            if w[1] < w[0] {
                return Err(KnotError::NotIncreasing(idx + 1));
            }
            if w[1] > w[0] {
                breakpoints.push(w[1]);
            } else if w[0] != knots[0] && w[0] != knots[m - 1] {
                return Err(KnotError::InteriorMultiplicity(idx));
            }
        }
        let built = Self::from_breakpoints(degree, &breakpoints)?;
        debug_assert_eq!(built.knots.len(), knots.len());
        Ok(built)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn num_spans(&self) -> usize {
        self.breakpoints.len() - 1
    }

    /// Dimension of the spline space: number of knots minus `p + 1`.
    pub fn num_functions(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    /// Index of the breakpoint span containing `x` (right-limit convention;
    /// `x = 1` falls in the last span).
    pub fn span_of(&self, x: f64) -> usize {
        assert!((0.0..=1.0).contains(&x), "x = {x} outside [0, 1]");
        match self.breakpoints.partition_point(|&b| b <= x) {
            k if k >= self.breakpoints.len() => self.num_spans() - 1,
            k => k - 1,
        }
    }

    /// Knot index `s` with `knots[s] <= x < knots[s+1]` (last nonempty
    /// interval at `x = 1`). Functions `s-p..=s` are the nonzero ones there.
    fn knot_span(&self, x: f64) -> usize {
        self.degree + self.span_of(x)
    }

    /// Values and first derivatives of the `p + 1` basis functions that are
    /// nonzero at `x`.
    pub fn nonzero_at(&self, x: f64) -> LocalBasis {
        let p = self.degree;
        let span = self.knot_span(x);
        let knots = &self.knots;

        // Triangular recursion, keeping the degree p-1 row for derivatives.
        let mut values = vec![0.0; p + 1];
        let mut lower = vec![0.0; p.max(1)];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        values[0] = 1.0;
        for j in 1..=p {
            if j == p {
                lower[..p].copy_from_slice(&values[..p]);
            }
            left[j] = x - knots[span + 1 - j];
            right[j] = knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }

        // B'_{i,p} = p * ( N_{i,p-1}/(k[i+p]-k[i]) - N_{i+1,p-1}/(k[i+p+1]-k[i+1]) ),
        // with N_{j,p-1} zero outside the p stored entries (lower[m] is the
        // value for function span-p+1+m).
        let first = span - p;
        let mut derivs = vec![0.0; p + 1];
        if p >= 1 {
            for k in 0..=p {
                let i = first + k;
                let mut d = 0.0;
                if k >= 1 && lower[k - 1] != 0.0 {
                    d += lower[k - 1] / (knots[i + p] - knots[i]);
                }
                if k <= p - 1 && lower[k] != 0.0 {
                    d -= lower[k] / (knots[i + p + 1] - knots[i + 1]);
                }
                derivs[k] = p as f64 * d;
            }
        }

        LocalBasis { first, values, derivs }
    }

    /// Value of basis function `i` at `x` (zero outside its support).
    pub fn value(&self, i: usize, x: f64) -> f64 {
        assert!(i < self.num_functions(), "function index {i} out of range");
        let local = self.nonzero_at(x);
        if i >= local.first && i <= local.first + self.degree {
            local.values[i - local.first]
        } else {
            0.0
        }
    }

    /// First derivative of basis function `i` at `x`.
    pub fn deriv(&self, i: usize, x: f64) -> f64 {
        assert!(i < self.num_functions(), "function index {i} out of range");
        let local = self.nonzero_at(x);
        if i >= local.first && i <= local.first + self.degree {
            local.derivs[i - local.first]
        } else {
            0.0
        }
    }

    /// Open support interval `(knots[i], knots[i+p+1])` of function `i`.
    pub fn support(&self, i: usize) -> (f64, f64) {
        assert!(i < self.num_functions(), "function index {i} out of range");
        (self.knots[i], self.knots[i + self.degree + 1])
    }

    /// Support spans and interacting functions for every basis function.
    pub fn index_sets(&self) -> IndexSets {
        let p = self.degree;
        let n = self.num_functions();
        let n_el = self.num_spans();
        let mut support_spans = Vec::with_capacity(n);
        let mut interactions = Vec::with_capacity(n);
        for i in 0..n {
            // Function i is nonzero exactly on spans i-p..=i (clipped): span k
            // spans knots p+k..p+k+1, and the recursion keeps i <= p+k <= i+p.
            let k_lo = i.saturating_sub(p);
            let k_hi = (i + 1).min(n_el);
            support_spans.push(k_lo..k_hi);
            // Functions alive on span k are k..=k+p, so the interacting set
            // runs from the first function of the first span to the last of
            // the last span.
            interactions.push(k_lo..(k_hi - 1 + p + 1).min(n));
        }
        IndexSets {
            support_spans,
            interactions,
        }
    }
}

/// Per-function support spans `K_i` and interacting functions `I_i`
/// (both contiguous for maximal-smoothness knot vectors).
#[derive(Debug, Clone)]
pub struct IndexSets {
    support_spans: Vec<Range<usize>>,
    interactions: Vec<Range<usize>>,
}

impl IndexSets {
    /// Spans on which function `i` is nonzero.
    pub fn support_spans(&self, i: usize) -> Range<usize> {
        self.support_spans[i].clone()
    }

    /// Functions whose support overlaps that of `i` on a set of positive
    /// measure (always including `i` itself).
    pub fn interactions(&self, i: usize) -> Range<usize> {
        self.interactions[i].clone()
    }

    pub fn num_functions(&self) -> usize {
        self.interactions.len()
    }

    /// Total number of interacting pairs, i.e. nonzeros of a 1D Galerkin
    /// matrix on this basis.
    pub fn num_nonzeros(&self) -> usize {
        self.interactions.iter().map(|r| r.len()).sum()
    }
}

/// Tensor-product spline space in 1 to 3 parametric directions.
///
/// Multi-indices linearize with direction 0 fastest: the global function
/// index of `(i_0, .., i_{d-1})` is `i_0 + n_0*(i_1 + n_1*i_2)`.
#[derive(Debug, Clone)]
pub struct SplineSpace {
    dirs: Vec<KnotVector>,
}

impl SplineSpace {
    pub fn new(dirs: Vec<KnotVector>) -> Self {
        assert!(
            (1..=3).contains(&dirs.len()),
            "supported dimensions are 1..=3, got {}",
            dirs.len()
        );
        Self { dirs }
    }

    /// Same degree and uniform spans in every direction.
    pub fn uniform(dim: usize, degree: usize, n_el: usize) -> Result<Self, KnotError> {
        let kv = KnotVector::open_uniform(degree, n_el)?;
        Ok(Self::new(vec![kv; dim]))
    }

    pub fn dim(&self) -> usize {
        self.dirs.len()
    }

    pub fn dir(&self, l: usize) -> &KnotVector {
        &self.dirs[l]
    }

    pub fn dirs(&self) -> &[KnotVector] {
        &self.dirs
    }

    pub fn num_functions_per_dir(&self) -> Vec<usize> {
        self.dirs.iter().map(|kv| kv.num_functions()).collect()
    }

    pub fn num_functions(&self) -> usize {
        self.dirs.iter().map(|kv| kv.num_functions()).product()
    }

    pub fn linear_index(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.dim());
        let mut idx = 0;
        for l in (0..self.dim()).rev() {
            debug_assert!(multi[l] < self.dirs[l].num_functions());
            idx = idx * self.dirs[l].num_functions() + multi[l];
        }
        idx
    }

    pub fn multi_index(&self, mut linear: usize) -> Vec<usize> {
        let mut multi = vec![0; self.dim()];
        for (l, kv) in self.dirs.iter().enumerate() {
            let n = kv.num_functions();
            multi[l] = linear % n;
            linear /= n;
        }
        debug_assert_eq!(linear, 0);
        multi
    }
}
