//! Central finite-difference oracle for the tape, plus a generator of small
//! random graphs that together exercise every differentiable op.

use nlpolicy::numerics::{Graph, SeededRng, Segment, Target, Tensor, Var};

pub type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

/// Norm-wise relative error between analytic and central-difference
/// gradients of the scalar produced by `build` with respect to `inputs`.
pub fn relative_error(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var, h: f32) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).expect("backward");

    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vars);
        g.value(out).item() as f64
    };

    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h as f64);
            let a = analytic.data()[j] as f64;
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-6)
}

fn rand_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let mut x = rng.normal();
        // keep clear of the relu kink so differences stay one-sided-free
        if x.abs() < 0.05 {
            x += 0.1f32.copysign(x);
        }
        *v = x;
    }
    t
}

/// Ops exercised by [`random_graph`], in rotation.
pub const OPS: &[&str] = &[
    "matmul",
    "matmul_t",
    "add",
    "mul",
    "scale",
    "add_row",
    "mul_row",
    "relu",
    "gelu",
    "tanh",
    "layernorm",
    "softmax",
    "log_softmax",
    "cross_entropy_class",
    "cross_entropy_soft",
    "embedding",
    "attention_self",
    "attention_causal",
    "attention_cross",
    "segment_mean",
    "concat_rows",
    "slice_rows",
    "sum",
    "mean",
    "dropout",
];

/// Builds a random graph of at most 64 elements per input whose focus op is
/// `OPS[trial % OPS.len()]`, followed by a random smooth post-op and a random
/// linear read-out to a scalar.
pub fn random_graph(trial: usize, rng: &mut SeededRng) -> (&'static str, Vec<Tensor>, Builder) {
    let op = OPS[trial % OPS.len()];
    let r = 2 + rng.below(3);
    let c = 2 * (1 + rng.below(4));
    let mut inputs = Vec::new();
    let focus: Builder = match op {
        "matmul" | "matmul_t" => {
            let k = 1 + rng.below(5);
            inputs.push(rand_tensor(rng, &[r, k]));
            if op == "matmul" {
                inputs.push(rand_tensor(rng, &[k, c]));
                Box::new(|g, v| g.matmul(v[0], v[1]).unwrap())
            } else {
                inputs.push(rand_tensor(rng, &[c, k]));
                Box::new(|g, v| g.matmul_t(v[0], v[1]).unwrap())
            }
        }
        "add" | "mul" => {
            inputs.push(rand_tensor(rng, &[r, c]));
            inputs.push(rand_tensor(rng, &[r, c]));
            if op == "add" {
                Box::new(|g, v| g.add(v[0], v[1]).unwrap())
            } else {
                Box::new(|g, v| g.mul(v[0], v[1]).unwrap())
            }
        }
        "scale" => {
            inputs.push(rand_tensor(rng, &[r, c]));
            let s = rng.normal();
            Box::new(move |g, v| g.scale(v[0], s))
        }
        "add_row" | "mul_row" => {
            inputs.push(rand_tensor(rng, &[r, c]));
            inputs.push(rand_tensor(rng, &[c]));
            if op == "add_row" {
                Box::new(|g, v| g.add_row(v[0], v[1]).unwrap())
            } else {
                Box::new(|g, v| g.mul_row(v[0], v[1]).unwrap())
            }
        }
        "relu" | "gelu" | "tanh" | "layernorm" | "softmax" | "log_softmax" | "sum" | "mean" => {
            // two-column layer norm is constant (±1) and has no gradient to check
            let c = if matches!(op, "log_softmax" | "layernorm") { c.max(4) } else { c };
            let mut x = rand_tensor(rng, &[r, c]);
            if op == "log_softmax" {
                // log-probabilities near zero keep output rounding small
                x.data_mut().iter_mut().for_each(|v| *v *= 0.5);
            }
            inputs.push(x);
            match op {
                "relu" => Box::new(|g, v| g.relu(v[0])),
                "gelu" => Box::new(|g, v| g.gelu(v[0])),
                "tanh" => Box::new(|g, v| g.tanh(v[0])),
                "layernorm" => Box::new(|g, v| g.layernorm(v[0], 1e-5)),
                "softmax" => Box::new(|g, v| g.softmax(v[0])),
                "log_softmax" => Box::new(|g, v| g.log_softmax(v[0])),
                "sum" => Box::new(|g, v| g.sum(v[0])),
                _ => Box::new(|g, v| g.mean(v[0])),
            }
        }
        "cross_entropy_class" | "cross_entropy_soft" => {
            // few rows/classes keep the scalar's f32 rounding below the signal
            let (r, c) = (2 + rng.below(2), 2 + rng.below(2));
            inputs.push(rand_tensor(rng, &[r, c]));
            let targets: Vec<Target> = (0..r)
                .map(|_| {
                    if op == "cross_entropy_class" {
                        Target::Class(rng.below(c))
                    } else {
                        let mut q: Vec<f32> = (0..c).map(|_| rng.uniform() + 0.05).collect();
                        let s: f32 = q.iter().sum();
                        q.iter_mut().for_each(|x| *x /= s);
                        Target::Soft(q)
                    }
                })
                .collect();
            let weights: Vec<f32> = (0..r).map(|_| rng.uniform() + 0.5).collect();
            Box::new(move |g, v| g.cross_entropy(v[0], &targets, Some(&weights)).unwrap())
        }
        "embedding" => {
            let n = 3 + rng.below(4);
            inputs.push(rand_tensor(rng, &[n, c]));
            let ids: Vec<usize> = (0..r + 1).map(|_| rng.below(n)).collect();
            Box::new(move |g, v| g.embedding(v[0], &ids).unwrap())
        }
        "attention_self" | "attention_causal" => {
            let heads = if c.is_multiple_of(4) { 2 } else { 1 };
            let lens = [r, 1 + rng.below(3)];
            let rows: usize = lens.iter().sum();
            for _ in 0..3 {
                inputs.push(rand_tensor(rng, &[rows, c]));
            }
            let segs = vec![Segment::square(0, lens[0]), Segment::square(lens[0], lens[1])];
            let causal = op == "attention_causal";
            Box::new(move |g, v| g.attention(v[0], v[1], v[2], heads, &segs, causal).unwrap())
        }
        "attention_cross" => {
            let heads = if c.is_multiple_of(4) { 2 } else { 1 };
            let (qa, qb, ka, kb) = (r, 1 + rng.below(2), 1 + rng.below(3), 2 + rng.below(2));
            inputs.push(rand_tensor(rng, &[qa + qb, c]));
            inputs.push(rand_tensor(rng, &[ka + kb, c]));
            inputs.push(rand_tensor(rng, &[ka + kb, c]));
            let segs = vec![
                Segment { q_start: 0, q_len: qa, k_start: 0, k_len: ka },
                Segment { q_start: qa, q_len: qb, k_start: ka, k_len: kb },
            ];
            Box::new(move |g, v| g.attention(v[0], v[1], v[2], heads, &segs, false).unwrap())
        }
        "segment_mean" => {
            inputs.push(rand_tensor(rng, &[r + 2, c]));
            let split = 1 + rng.below(r + 1);
            let segs = vec![(0, split), (split, r + 2 - split)];
            Box::new(move |g, v| g.segment_mean(v[0], &segs).unwrap())
        }
        "concat_rows" => {
            inputs.push(rand_tensor(rng, &[r, c]));
            let extra = 1 + rng.below(3);
            inputs.push(rand_tensor(rng, &[extra, c]));
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]]).unwrap())
        }
        "slice_rows" => {
            inputs.push(rand_tensor(rng, &[r + 2, c]));
            let start = rng.below(2);
            Box::new(move |g, v| g.slice_rows(v[0], start, r).unwrap())
        }
        "dropout" => {
            inputs.push(rand_tensor(rng, &[r, c]));
            let seed = rng.below(1 << 30) as u64;
            Box::new(move |g, v| {
                let mut drng = SeededRng::new(seed);
                g.dropout(v[0], 0.3, &mut drng)
            })
        }
        other => unreachable!("{other}"),
    };
    let scalar_out = matches!(op, "cross_entropy_class" | "cross_entropy_soft" | "sum" | "mean");
    // tanh would saturate on log-probabilities
    let post = if scalar_out || op == "log_softmax" { 3 } else { rng.below(4) };
    let readout_seed = rng.below(1 << 30) as u64;
    let build: Builder = Box::new(move |g, v| {
        let y = focus(g, v);
        let y = match post {
            0 => g.tanh(y),
            1 => g.scale(y, 0.7),
            _ => y,
        };
        let shape = g.value(y).shape().to_vec();
        let mut rr = SeededRng::new(readout_seed);
        let weights = if scalar_out {
            Tensor::full(&shape, 1.0)
        } else if op == "log_softmax" {
            // NLL-like read-out; a dense random one nearly cancels the gradient
            let mut w = Tensor::zeros(&shape);
            let c = *shape.last().unwrap();
            for row in w.data_mut().chunks_mut(c) {
                row[rr.below(c)] = 1.0 + rr.uniform();
            }
            w
        } else {
            rand_tensor(&mut rr, &shape)
        };
        let w = g.leaf(weights, false);
        let prod = g.mul(y, w).unwrap();
        g.sum(prod)
    });
    (op, inputs, build)
}
