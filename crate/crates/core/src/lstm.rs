//! One unidirectional LSTM layer: per-timestep forward pass and the exact
//! backward pass through time.
//!
//! Per timestep, with `g = h = tanh` and `σ` the logistic sigmoid:
//!
//! ```text
//! z_t = g(W_z x_t + R_z y_{t-1} + b_z)                    block input
//! i_t = σ(W_i x_t + R_i y_{t-1} + p_i ⊙ c_{t-1} + b_i)    input gate
//! f_t = σ(W_f x_t + R_f y_{t-1} + p_f ⊙ c_{t-1} + b_f)    forget gate
//! c_t = i_t ⊙ z_t + f_t ⊙ c_{t-1}                         cell state
//! o_t = σ(W_o x_t + R_o y_{t-1} + p_o ⊙ c_t + b_o)        output gate
//! y_t = o_t ⊙ h(c_t)                                      output
//! ```
//!
//! The peephole terms `p_k` are optional; with them disabled the `p_k`
//! vectors are identically zero and excluded from gradient updates.

use crate::linalg::{add, hadamard, init_uniform, matvec, matvec_t, sigmoid, tanh, Matrix, Rng, Vector};

/// All trainable parameters of one LSTM layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_z: Matrix,
    pub r_z: Matrix,
    pub b_z: Vector,
    pub w_i: Matrix,
    pub r_i: Matrix,
    pub b_i: Vector,
    pub w_f: Matrix,
    pub r_f: Matrix,
    pub b_f: Vector,
    pub w_o: Matrix,
    pub r_o: Matrix,
    pub b_o: Vector,
    pub p_i: Vector,
    pub p_f: Vector,
    pub p_o: Vector,
    pub use_peepholes: bool,
}

impl LstmParams {
    /// All-zero parameters (useful as a gradient accumulator).
    pub fn zeros(input_dim: usize, hidden_dim: usize, use_peepholes: bool) -> Self {
        LstmParams {
            w_z: Matrix::zeros(hidden_dim, input_dim),
            r_z: Matrix::zeros(hidden_dim, hidden_dim),
            b_z: Vector::zeros(hidden_dim),
            w_i: Matrix::zeros(hidden_dim, input_dim),
            r_i: Matrix::zeros(hidden_dim, hidden_dim),
            b_i: Vector::zeros(hidden_dim),
            w_f: Matrix::zeros(hidden_dim, input_dim),
            r_f: Matrix::zeros(hidden_dim, hidden_dim),
            b_f: Vector::zeros(hidden_dim),
            w_o: Matrix::zeros(hidden_dim, input_dim),
            r_o: Matrix::zeros(hidden_dim, hidden_dim),
            b_o: Vector::zeros(hidden_dim),
            p_i: Vector::zeros(hidden_dim),
            p_f: Vector::zeros(hidden_dim),
            p_o: Vector::zeros(hidden_dim),
            use_peepholes,
        }
    }

    /// Random initialization: weights (and peepholes, when enabled) uniform in
    /// `[-scale, +scale]`, biases zero except the forget-gate bias at +1.0.
    ///
    /// Draw order is fixed: W_z, R_z, W_i, R_i, W_f, R_f, W_o, R_o, then
    /// p_i, p_f, p_o when peepholes are on.
    pub fn init(rng: &mut Rng, input_dim: usize, hidden_dim: usize, scale: f64, use_peepholes: bool) -> Self {
        let mut p = LstmParams::zeros(input_dim, hidden_dim, use_peepholes);
        p.w_z = init_uniform(rng, hidden_dim, input_dim, scale);
        p.r_z = init_uniform(rng, hidden_dim, hidden_dim, scale);
        p.w_i = init_uniform(rng, hidden_dim, input_dim, scale);
        p.r_i = init_uniform(rng, hidden_dim, hidden_dim, scale);
        p.w_f = init_uniform(rng, hidden_dim, input_dim, scale);
        p.r_f = init_uniform(rng, hidden_dim, hidden_dim, scale);
        p.w_o = init_uniform(rng, hidden_dim, input_dim, scale);
        p.r_o = init_uniform(rng, hidden_dim, hidden_dim, scale);
        if use_peepholes {
            p.p_i = crate::linalg::init_uniform_vec(rng, hidden_dim, scale);
            p.p_f = crate::linalg::init_uniform_vec(rng, hidden_dim, scale);
            p.p_o = crate::linalg::init_uniform_vec(rng, hidden_dim, scale);
        }
        for v in p.b_f.as_mut_slice() {
            *v = 1.0;
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.rows()
    }

    /// Named flat views of every trainable block, in serialization order.
    /// Peephole vectors appear only when peepholes are enabled.
    pub fn blocks_mut(&mut self, prefix: &str) -> Vec<(String, &mut [f64])> {
        let peep = self.use_peepholes;
        let mut out: Vec<(String, &mut [f64])> = vec![
            (format!("{prefix}.w_z"), self.w_z.as_mut_slice()),
            (format!("{prefix}.r_z"), self.r_z.as_mut_slice()),
            (format!("{prefix}.b_z"), self.b_z.as_mut_slice()),
            (format!("{prefix}.w_i"), self.w_i.as_mut_slice()),
            (format!("{prefix}.r_i"), self.r_i.as_mut_slice()),
            (format!("{prefix}.b_i"), self.b_i.as_mut_slice()),
        ];
        if peep {
            out.push((format!("{prefix}.p_i"), self.p_i.as_mut_slice()));
        }
        out.push((format!("{prefix}.w_f"), self.w_f.as_mut_slice()));
        out.push((format!("{prefix}.r_f"), self.r_f.as_mut_slice()));
        out.push((format!("{prefix}.b_f"), self.b_f.as_mut_slice()));
        if peep {
            out.push((format!("{prefix}.p_f"), self.p_f.as_mut_slice()));
        }
        out.push((format!("{prefix}.w_o"), self.w_o.as_mut_slice()));
        out.push((format!("{prefix}.r_o"), self.r_o.as_mut_slice()));
        out.push((format!("{prefix}.b_o"), self.b_o.as_mut_slice()));
        if peep {
            out.push((format!("{prefix}.p_o"), self.p_o.as_mut_slice()));
        }
        out
    }
}

/// Recurrent state: cell and output vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub c: Vector,
    pub y: Vector,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        LstmState { c: Vector::zeros(hidden_dim), y: Vector::zeros(hidden_dim) }
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmStepRecord {
    pub x: Vector,
    pub z_pre: Vector,
    pub z: Vector,
    pub i_pre: Vector,
    pub i: Vector,
    pub f_pre: Vector,
    pub f: Vector,
    pub c: Vector,
    pub o_pre: Vector,
    pub o: Vector,
    pub y: Vector,
}

/// Forward-pass record over a whole sequence, including the initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmTape {
    pub init: LstmState,
    pub steps: Vec<LstmStepRecord>,
}

impl LstmTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn prev_c(&self, t: usize) -> &Vector {
        if t == 0 {
            &self.init.c
        } else {
            &self.steps[t - 1].c
        }
    }

    fn prev_y(&self, t: usize) -> &Vector {
        if t == 0 {
            &self.init.y
        } else {
            &self.steps[t - 1].y
        }
    }
}

/// Gradients for every block of [`LstmParams`], same shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmGrads {
    pub w_z: Matrix,
    pub r_z: Matrix,
    pub b_z: Vector,
    pub w_i: Matrix,
    pub r_i: Matrix,
    pub b_i: Vector,
    pub w_f: Matrix,
    pub r_f: Matrix,
    pub b_f: Vector,
    pub w_o: Matrix,
    pub r_o: Matrix,
    pub b_o: Vector,
    pub p_i: Vector,
    pub p_f: Vector,
    pub p_o: Vector,
    pub use_peepholes: bool,
}

impl LstmGrads {
    pub fn zeros(input_dim: usize, hidden_dim: usize, use_peepholes: bool) -> Self {
        let p = LstmParams::zeros(input_dim, hidden_dim, use_peepholes);
        LstmGrads {
            w_z: p.w_z,
            r_z: p.r_z,
            b_z: p.b_z,
            w_i: p.w_i,
            r_i: p.r_i,
            b_i: p.b_i,
            w_f: p.w_f,
            r_f: p.r_f,
            b_f: p.b_f,
            w_o: p.w_o,
            r_o: p.r_o,
            b_o: p.b_o,
            p_i: p.p_i,
            p_f: p.p_f,
            p_o: p.p_o,
            use_peepholes,
        }
    }

    pub fn add_assign(&mut self, other: &LstmGrads) {
        self.w_z.add_assign(&other.w_z);
        self.r_z.add_assign(&other.r_z);
        self.b_z.add_assign(&other.b_z);
        self.w_i.add_assign(&other.w_i);
        self.r_i.add_assign(&other.r_i);
        self.b_i.add_assign(&other.b_i);
        self.w_f.add_assign(&other.w_f);
        self.r_f.add_assign(&other.r_f);
        self.b_f.add_assign(&other.b_f);
        self.w_o.add_assign(&other.w_o);
        self.r_o.add_assign(&other.r_o);
        self.b_o.add_assign(&other.b_o);
        if self.use_peepholes {
            self.p_i.add_assign(&other.p_i);
            self.p_f.add_assign(&other.p_f);
            self.p_o.add_assign(&other.p_o);
        }
    }

    /// Same block order and naming as [`LstmParams::blocks_mut`].
    pub fn blocks_mut(&mut self, prefix: &str) -> Vec<(String, &mut [f64])> {
        let peep = self.use_peepholes;
        let mut out: Vec<(String, &mut [f64])> = vec![
            (format!("{prefix}.w_z"), self.w_z.as_mut_slice()),
            (format!("{prefix}.r_z"), self.r_z.as_mut_slice()),
            (format!("{prefix}.b_z"), self.b_z.as_mut_slice()),
            (format!("{prefix}.w_i"), self.w_i.as_mut_slice()),
            (format!("{prefix}.r_i"), self.r_i.as_mut_slice()),
            (format!("{prefix}.b_i"), self.b_i.as_mut_slice()),
        ];
        if peep {
            out.push((format!("{prefix}.p_i"), self.p_i.as_mut_slice()));
        }
        out.push((format!("{prefix}.w_f"), self.w_f.as_mut_slice()));
        out.push((format!("{prefix}.r_f"), self.r_f.as_mut_slice()));
        out.push((format!("{prefix}.b_f"), self.b_f.as_mut_slice()));
        if peep {
            out.push((format!("{prefix}.p_f"), self.p_f.as_mut_slice()));
        }
        out.push((format!("{prefix}.w_o"), self.w_o.as_mut_slice()));
        out.push((format!("{prefix}.r_o"), self.r_o.as_mut_slice()));
        out.push((format!("{prefix}.b_o"), self.b_o.as_mut_slice()));
        if peep {
            out.push((format!("{prefix}.p_o"), self.p_o.as_mut_slice()));
        }
        out
    }
}

/// One forward timestep. Returns the new state and the tape record.
pub fn lstm_step(params: &LstmParams, x: &Vector, prev: &LstmState) -> (LstmState, LstmStepRecord) {
    assert_eq!(
        x.len(),
        params.input_dim(),
        "lstm_step input length {} does not match input dim {}",
        x.len(),
        params.input_dim()
    );
    assert_eq!(
        prev.c.len(),
        params.hidden_dim(),
        "lstm_step state length {} does not match hidden dim {}",
        prev.c.len(),
        params.hidden_dim()
    );

    let mut z_pre = add(&add(&matvec(&params.w_z, x), &matvec(&params.r_z, &prev.y)), &params.b_z);
    let mut i_pre = add(&add(&matvec(&params.w_i, x), &matvec(&params.r_i, &prev.y)), &params.b_i);
    let mut f_pre = add(&add(&matvec(&params.w_f, x), &matvec(&params.r_f, &prev.y)), &params.b_f);
    if params.use_peepholes {
        i_pre.add_assign(&hadamard(&params.p_i, &prev.c));
        f_pre.add_assign(&hadamard(&params.p_f, &prev.c));
    }
    let z = tanh(&z_pre);
    let i = sigmoid(&i_pre);
    let f = sigmoid(&f_pre);
    let c = add(&hadamard(&i, &z), &hadamard(&f, &prev.c));

    let mut o_pre = add(&add(&matvec(&params.w_o, x), &matvec(&params.r_o, &prev.y)), &params.b_o);
    if params.use_peepholes {
        o_pre.add_assign(&hadamard(&params.p_o, &c));
    }
    let o = sigmoid(&o_pre);
    let y = hadamard(&o, &tanh(&c));

    // keep z_pre etc. around so the tape can be replayed exactly
    let record = LstmStepRecord {
        x: x.clone(),
        z_pre: std::mem::replace(&mut z_pre, Vector::zeros(0)),
        z,
        i_pre: std::mem::replace(&mut i_pre, Vector::zeros(0)),
        i,
        f_pre: std::mem::replace(&mut f_pre, Vector::zeros(0)),
        f,
        c: c.clone(),
        o_pre: std::mem::replace(&mut o_pre, Vector::zeros(0)),
        o: o.clone(),
        y: y.clone(),
    };
    (LstmState { c, y }, record)
}

/// Left-to-right forward pass over a sequence. An empty sequence yields empty
/// outputs and an empty tape.
pub fn lstm_forward(params: &LstmParams, xs: &[Vector], init: &LstmState) -> (Vec<Vector>, LstmTape) {
    let mut state = init.clone();
    let mut outputs = Vec::with_capacity(xs.len());
    let mut steps = Vec::with_capacity(xs.len());
    for x in xs {
        let (next, record) = lstm_step(params, x, &state);
        outputs.push(next.y.clone());
        steps.push(record);
        state = next;
    }
    (outputs, LstmTape { init: init.clone(), steps })
}

/// Exact backward pass through time.
///
/// `grad_ys[t]` is `∂L/∂y_t`; the return value carries `∂L/∂θ` for every
/// parameter block and `∂L/∂x_t` for every input. Peephole gradients are
/// zero when peepholes are disabled.
pub fn lstm_backward(params: &LstmParams, tape: &LstmTape, grad_ys: &[Vector]) -> (LstmGrads, Vec<Vector>) {
    assert_eq!(
        grad_ys.len(),
        tape.len(),
        "lstm_backward: {} upstream gradients for a tape of {} steps",
        grad_ys.len(),
        tape.len()
    );
    let d_in = params.input_dim();
    let d_h = params.hidden_dim();
    let mut grads = LstmGrads::zeros(d_in, d_h, params.use_peepholes);
    let mut grad_xs = vec![Vector::zeros(d_in); tape.len()];

    // recurrent carries into step t from step t+1
    let mut dy_rec = Vector::zeros(d_h);
    let mut dc_rec = Vector::zeros(d_h);

    for t in (0..tape.len()).rev() {
        let rec = &tape.steps[t];
        let c_prev = tape.prev_c(t);
        let y_prev = tape.prev_y(t);

        let dy = add(&grad_ys[t], &dy_rec);
        let h_c = tanh(&rec.c);

        // output gate: d(o_pre) = dy ⊙ h(c) ⊙ o(1-o)
        let mut d_o_pre = Vector::zeros(d_h);
        for k in 0..d_h {
            d_o_pre[k] = dy[k] * h_c[k] * rec.o[k] * (1.0 - rec.o[k]);
        }

        // cell: dy through y = o ⊙ h(c), plus the future carry, plus the
        // output-gate peephole which reads the current cell
        let mut dc = dc_rec.clone();
        for k in 0..d_h {
            dc[k] += dy[k] * rec.o[k] * (1.0 - h_c[k] * h_c[k]);
        }
        if params.use_peepholes {
            for k in 0..d_h {
                dc[k] += params.p_o[k] * d_o_pre[k];
            }
        }

        let mut d_f_pre = Vector::zeros(d_h);
        let mut d_i_pre = Vector::zeros(d_h);
        let mut d_z_pre = Vector::zeros(d_h);
        for k in 0..d_h {
            d_f_pre[k] = dc[k] * c_prev[k] * rec.f[k] * (1.0 - rec.f[k]);
            d_i_pre[k] = dc[k] * rec.z[k] * rec.i[k] * (1.0 - rec.i[k]);
            d_z_pre[k] = dc[k] * rec.i[k] * (1.0 - rec.z[k] * rec.z[k]);
        }

        grads.w_z.add_outer(&d_z_pre, &rec.x);
        grads.r_z.add_outer(&d_z_pre, y_prev);
        grads.b_z.add_assign(&d_z_pre);
        grads.w_i.add_outer(&d_i_pre, &rec.x);
        grads.r_i.add_outer(&d_i_pre, y_prev);
        grads.b_i.add_assign(&d_i_pre);
        grads.w_f.add_outer(&d_f_pre, &rec.x);
        grads.r_f.add_outer(&d_f_pre, y_prev);
        grads.b_f.add_assign(&d_f_pre);
        grads.w_o.add_outer(&d_o_pre, &rec.x);
        grads.r_o.add_outer(&d_o_pre, y_prev);
        grads.b_o.add_assign(&d_o_pre);
        if params.use_peepholes {
            for k in 0..d_h {
                grads.p_i[k] += d_i_pre[k] * c_prev[k];
                grads.p_f[k] += d_f_pre[k] * c_prev[k];
                grads.p_o[k] += d_o_pre[k] * rec.c[k];
            }
        }

        let mut gx = matvec_t(&params.w_z, &d_z_pre);
        gx.add_assign(&matvec_t(&params.w_i, &d_i_pre));
        gx.add_assign(&matvec_t(&params.w_f, &d_f_pre));
        gx.add_assign(&matvec_t(&params.w_o, &d_o_pre));
        grad_xs[t] = gx;

        let mut dy_next = matvec_t(&params.r_z, &d_z_pre);
        dy_next.add_assign(&matvec_t(&params.r_i, &d_i_pre));
        dy_next.add_assign(&matvec_t(&params.r_f, &d_f_pre));
        dy_next.add_assign(&matvec_t(&params.r_o, &d_o_pre));
        dy_rec = dy_next;

        let mut dc_next = hadamard(&dc, &rec.f);
        if params.use_peepholes {
            for k in 0..d_h {
                dc_next[k] += params.p_i[k] * d_i_pre[k] + params.p_f[k] * d_f_pre[k];
            }
        }
        dc_rec = dc_next;
    }

    (grads, grad_xs)
}
