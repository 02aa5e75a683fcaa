//! Convex quadratic programs with named variables and constraints.
//!
//! The model deliberately supports only what the dispatch problems need:
//! box-bounded variables, a diagonal quadratic + linear objective, and
//! named linear equality/inequality constraints. Everything is solved as
//! a minimization; callers that want to maximize negate their objective
//! before building the problem.
//!
//! Equality constraints carry dual values in shadow-price convention:
//! the dual is the derivative of the optimal objective with respect to
//! the constraint right-hand side.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use thiserror::Error;

/// Handle to a variable in a [`Problem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

/// Handle to a constraint in a [`Problem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConstraintId(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
enum Relation {
    Eq,
    Le,
    Ge,
}

#[derive(Debug, Clone)]
struct Variable {
    name: String,
    lower: f64,
    upper: f64,
    linear: f64,
    quadratic: f64,
}

#[derive(Debug, Clone)]
struct Constraint {
    name: String,
    terms: Vec<(VarId, f64)>,
    relation: Relation,
    rhs: f64,
}

/// A convex QP: min Σ qᵢxᵢ² + cᵢxᵢ subject to bounds and linear constraints.
#[derive(Debug, Clone, Default)]
pub struct Problem {
    vars: Vec<Variable>,
    cons: Vec<Constraint>,
}

/// Outcome classification of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Primal/dual values returned by [`solve`].
#[derive(Debug, Clone)]
pub struct Solution {
    pub status: Status,
    pub objective: f64,
    values: Vec<f64>,
    duals: Vec<f64>,
}

impl Solution {
    /// Primal value of a variable. Meaningful only when status is optimal.
    pub fn value(&self, v: VarId) -> f64 {
        self.values[v.0]
    }

    pub fn values_of(&self, vars: &[VarId]) -> Vec<f64> {
        vars.iter().map(|v| self.value(*v)).collect()
    }

    /// Shadow price of an equality constraint: d(objective)/d(rhs).
    ///
    /// Returns 0.0 for inequality constraints (their duals are not tracked).
    pub fn dual(&self, c: ConstraintId) -> f64 {
        self.duals[c.0]
    }

    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }
}

#[derive(Debug, Error)]
pub enum QpError {
    #[error("negative quadratic coefficient {coefficient} on variable `{name}` breaks convexity")]
    NonConvex { name: String, coefficient: f64 },
    #[error("solver terminated abnormally: {0:?}")]
    Solver(SolverStatus),
    #[error("solution violates `{name}` by {violation:.3e} (tolerance {tolerance:.1e})")]
    FeasibilityCheck {
        name: String,
        violation: f64,
        tolerance: f64,
    },
}

/// Absolute feasibility tolerance accepted on returned solutions (MW scale).
pub const FEASIBILITY_TOL: f64 = 1e-6;

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: f64, upper: f64) -> VarId {
        let id = VarId(self.vars.len());
        self.vars.push(Variable {
            name: name.into(),
            lower,
            upper,
            linear: 0.0,
            quadratic: 0.0,
        });
        id
    }

    /// Adds `c·x` to the objective (accumulates across calls).
    pub fn add_linear(&mut self, v: VarId, c: f64) {
        self.vars[v.0].linear += c;
    }

    /// Adds `q·x²` to the objective (accumulates across calls).
    pub fn add_quadratic(&mut self, v: VarId, q: f64) {
        self.vars[v.0].quadratic += q;
    }

    pub fn equality(
        &mut self,
        name: impl Into<String>,
        terms: Vec<(VarId, f64)>,
        rhs: f64,
    ) -> ConstraintId {
        self.push_constraint(name, terms, Relation::Eq, rhs)
    }

    pub fn less_equal(
        &mut self,
        name: impl Into<String>,
        terms: Vec<(VarId, f64)>,
        rhs: f64,
    ) -> ConstraintId {
        self.push_constraint(name, terms, Relation::Le, rhs)
    }

    pub fn greater_equal(
        &mut self,
        name: impl Into<String>,
        terms: Vec<(VarId, f64)>,
        rhs: f64,
    ) -> ConstraintId {
        self.push_constraint(name, terms, Relation::Ge, rhs)
    }

    fn push_constraint(
        &mut self,
        name: impl Into<String>,
        terms: Vec<(VarId, f64)>,
        relation: Relation,
        rhs: f64,
    ) -> ConstraintId {
        let id = ConstraintId(self.cons.len());
        self.cons.push(Constraint {
            name: name.into(),
            terms,
            relation,
            rhs,
        });
        id
    }

    pub fn var_count(&self) -> usize {
        self.vars.len()
    }

    pub fn constraint_count(&self) -> usize {
        self.cons.len()
    }

    pub fn var_name(&self, v: VarId) -> &str {
        &self.vars[v.0].name
    }

    /// Debug dump in an LP-style text format.
    pub fn to_lp_string(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        out.push_str("Minimize\n obj:");
        for v in &self.vars {
            if v.quadratic != 0.0 {
                let _ = write!(out, " + {} {}^2", v.quadratic, v.name);
            }
            if v.linear != 0.0 {
                let _ = write!(out, " + {} {}", v.linear, v.name);
            }
        }
        out.push_str("\nSubject To\n");
        for c in &self.cons {
            let _ = write!(out, " {}:", c.name);
            for (v, coef) in &c.terms {
                let _ = write!(out, " + {} {}", coef, self.vars[v.0].name);
            }
            let rel = match c.relation {
                Relation::Eq => "=",
                Relation::Le => "<=",
                Relation::Ge => ">=",
            };
            let _ = writeln!(out, " {} {}", rel, c.rhs);
        }
        out.push_str("Bounds\n");
        for v in &self.vars {
            let _ = writeln!(out, " {} <= {} <= {}", v.lower, v.name, v.upper);
        }
        out.push_str("End\n");
        out
    }

    /// Builds the conic data: rows are equalities first, then all
    /// inequalities normalized to `a·x <= b`, then finite bounds.
    fn assemble(&self) -> (CscMatrix<f64>, Vec<f64>, Vec<SupportedConeT<f64>>, usize) {
        let n = self.vars.len();
        // (row, col, coef) triplets in row order.
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut b = Vec::new();

        let mut eq_count = 0;
        for c in &self.cons {
            if c.relation == Relation::Eq {
                rows.push(c.terms.iter().map(|(v, k)| (v.0, *k)).collect());
                b.push(c.rhs);
                eq_count += 1;
            }
        }
        for c in &self.cons {
            match c.relation {
                Relation::Eq => {}
                Relation::Le => {
                    rows.push(c.terms.iter().map(|(v, k)| (v.0, *k)).collect());
                    b.push(c.rhs);
                }
                Relation::Ge => {
                    rows.push(c.terms.iter().map(|(v, k)| (v.0, -*k)).collect());
                    b.push(-c.rhs);
                }
            }
        }
        for (i, v) in self.vars.iter().enumerate() {
            if v.upper.is_finite() {
                rows.push(vec![(i, 1.0)]);
                b.push(v.upper);
            }
            if v.lower.is_finite() {
                rows.push(vec![(i, -1.0)]);
                b.push(-v.lower);
            }
        }

        let m = rows.len();
        // Column-major assembly.
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (r, row) in rows.iter().enumerate() {
            for (c, coef) in row {
                if *coef != 0.0 {
                    cols[*c].push((r, *coef));
                }
            }
        }
        let mut colptr = Vec::with_capacity(n + 1);
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        colptr.push(0);
        for col in &mut cols {
            col.sort_by_key(|(r, _)| *r);
            for (r, coef) in col {
                rowval.push(*r);
                nzval.push(*coef);
            }
            colptr.push(rowval.len());
        }
        let a = CscMatrix::new(m, n, colptr, rowval, nzval);

        let mut cones = Vec::new();
        if eq_count > 0 {
            cones.push(SupportedConeT::ZeroConeT(eq_count));
        }
        if m > eq_count {
            cones.push(SupportedConeT::NonnegativeConeT(m - eq_count));
        }
        (a, b, cones, eq_count)
    }

    fn residual(&self, c: &Constraint, x: &[f64]) -> f64 {
        let lhs: f64 = c.terms.iter().map(|(v, k)| k * x[v.0]).sum();
        match c.relation {
            Relation::Eq => (lhs - c.rhs).abs(),
            Relation::Le => (lhs - c.rhs).max(0.0),
            Relation::Ge => (c.rhs - lhs).max(0.0),
        }
    }
}

/// Solves the problem. Infeasible and unbounded outcomes are reported via
/// [`Status`]; `Err` is reserved for abnormal solver termination.
pub fn solve(problem: &Problem) -> Result<Solution, QpError> {
    for v in &problem.vars {
        if v.quadratic < 0.0 {
            return Err(QpError::NonConvex {
                name: v.name.clone(),
                coefficient: v.quadratic,
            });
        }
    }

    let n = problem.vars.len();
    let p_diag: Vec<f64> = problem.vars.iter().map(|v| 2.0 * v.quadratic).collect();
    let p = diagonal_csc(&p_diag);
    let q: Vec<f64> = problem.vars.iter().map(|v| v.linear).collect();
    let (a, b, cones, eq_count) = problem.assemble();

    let settings = DefaultSettings {
        verbose: false,
        max_iter: 500,
        tol_gap_abs: 1e-11,
        tol_gap_rel: 1e-11,
        tol_feas: 1e-9,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
        .map_err(|_| QpError::Solver(SolverStatus::Unsolved))?;
    solver.solve();
    let sol = &solver.solution;

    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => Status::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => Status::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => Status::Unbounded,
        other => return Err(QpError::Solver(other)),
    };

    let mut values = vec![0.0; n];
    let mut duals = vec![0.0; problem.cons.len()];
    let mut objective = 0.0;
    if status == Status::Optimal {
        values.copy_from_slice(&sol.x);
        objective = sol.obj_val;
        // Clarabel's multipliers satisfy Px + q + Aᵀz = 0, so the
        // shadow price d(obj)/d(rhs) is -z.
        let mut eq_row = 0;
        for (i, c) in problem.cons.iter().enumerate() {
            if c.relation == Relation::Eq {
                duals[i] = -sol.z[eq_row];
                eq_row += 1;
            }
        }
        debug_assert_eq!(eq_row, eq_count);

        for c in &problem.cons {
            let viol = problem.residual(c, &values);
            if viol > FEASIBILITY_TOL {
                return Err(QpError::FeasibilityCheck {
                    name: c.name.clone(),
                    violation: viol,
                    tolerance: FEASIBILITY_TOL,
                });
            }
        }
    }

    Ok(Solution {
        status,
        objective,
        values,
        duals,
    })
}

fn diagonal_csc(diag: &[f64]) -> CscMatrix<f64> {
    let n = diag.len();
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for (i, d) in diag.iter().enumerate() {
        if *d != 0.0 {
            rowval.push(i);
            nzval.push(*d);
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(n, n, colptr, rowval, nzval)
}
