//! Central finite differences, used to check tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference gradient of `f` at `x` with step `h`.
///
/// `f` is only ever evaluated, never differentiated, so this stays
/// independent of the tape's backward pass.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error between two gradients, with the
/// index where it occurs.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .enumerate()
        .fold((0.0, 0), |best, (i, e)| if e > best.0 { (e, i) } else { best })
}

/// Outcome of checking one primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

type Build = fn(&mut Tape<'_>, &[Var]) -> Result<Var>;

/// Checks the backward pass of `build` at `inputs`. The output is reduced
/// to a scalar through a fixed random weighting so that every output
/// element receives a distinct upstream gradient.
pub fn check_op(inputs: &[Tensor], build: impl Fn(&mut Tape<'_>, &[Var]) -> Result<Var>, h: f64, seed: u64) -> Result<f64> {
    let reduce = |tape: &mut Tape<'_>, out: Var| -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.shape(out).to_vec();
        let n = shape.iter().product();
        let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let w = tape.constant(w);
        let weighted = tape.mul(out, w)?;
        tape.sum(weighted)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|v| tape.grad(*v).expect("leaf requires grad").to_vec())
        .collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let mut failure = None;
    let numeric = central_difference(&flat, h, |x| {
        let mut tape = Tape::new();
        let mut offset = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let data = x[offset..offset + t.numel()].to_vec();
                offset += t.numel();
                tape.leaf(Tensor::new(t.shape().to_vec(), data).expect("same shape"))
            })
            .collect();
        match build(&mut tape, &vars).and_then(|out| reduce(&mut tape, out)) {
            Ok(l) => tape.scalar(l),
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(max_relative_error(&analytic, &numeric).0)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).expect("finite")
}

/// Values bounded away from zero, so that a finite-difference step never
/// straddles a kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite")
}

/// Gradient checks for every differentiable tape primitive, at step `h`.
pub fn check_all_primitives(seed: u64, h: f64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let cases: Vec<(&'static str, Vec<Tensor>, Build)> = vec![
        ("add", vec![random(r, &[2, 3]), random(r, &[2, 3])], |t, v| t.add(v[0], v[1])),
        ("sub", vec![random(r, &[2, 3]), random(r, &[2, 3])], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![random(r, &[2, 3]), random(r, &[2, 3])], |t, v| t.mul(v[0], v[1])),
        ("add_row", vec![random(r, &[3, 4]), random(r, &[4])], |t, v| t.add_row(v[0], v[1])),
        ("scale", vec![random(r, &[5])], |t, v| t.scale(v[0], -0.7)),
        ("neg", vec![random(r, &[5])], |t, v| t.neg(v[0])),
        ("matmul", vec![random(r, &[2, 3]), random(r, &[3, 4])], |t, v| t.matmul(v[0], v[1])),
        ("matmul_nt", vec![random(r, &[2, 3]), random(r, &[4, 3])], |t, v| t.matmul_nt(v[0], v[1])),
        ("transpose", vec![random(r, &[2, 3])], |t, v| t.transpose(v[0])),
        ("relu", vec![away_from_zero(r, &[3, 3])], |t, v| t.relu(v[0])),
        ("softmax_rows", vec![random(r, &[3, 4])], |t, v| t.softmax(v[0], 1)),
        ("softmax_cols", vec![random(r, &[3, 4])], |t, v| t.softmax(v[0], 0)),
        ("masked_softmax", vec![random(r, &[3, 3])], |t, v| {
            t.masked_softmax(v[0], &[true, false, true, true, true, false, false, false, false])
        }),
        ("cross_entropy", vec![random(r, &[3, 5])], |t, v| {
            t.cross_entropy(v[0], &[Some(2), None, Some(0)])
        }),
        ("entropy", vec![random(r, &[6])], |t, v| {
            let p = t.softmax(v[0], 0)?;
            t.entropy(p)
        }),
        ("mean_pool", vec![random(r, &[4, 3])], |t, v| t.mean_pool(v[0], &[true, false, true, true])),
        ("layer_norm", vec![random(r, &[3, 4]), random(r, &[4]), random(r, &[4])], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-6)
        }),
        ("gather", vec![random(r, &[5, 3])], |t, v| t.gather(v[0], &[4, 0, 4, 2])),
        ("slice_cols", vec![random(r, &[3, 5])], |t, v| t.slice_cols(v[0], 1, 3)),
        ("concat_cols", vec![random(r, &[2, 2]), random(r, &[2, 3])], |t, v| t.concat_cols(&[v[0], v[1]])),
        ("sum", vec![random(r, &[2, 3])], |t, v| t.sum(v[0])),
        ("mean", vec![random(r, &[2, 3])], |t, v| t.mean(v[0])),
        ("reshape", vec![random(r, &[2, 3])], |t, v| t.reshape(v[0], vec![3, 2])),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, build))| {
            Ok(PrimitiveCheck {
                name,
                max_rel_err: check_op(&inputs, build, h, seed ^ (i as u64 + 1))?,
            })
        })
        .collect()
}
