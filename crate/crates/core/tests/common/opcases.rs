//! Table of every differentiable tape op with an f64 reference forward.

use std::rc::Rc;

use super::{central_diff, max_rel_err, rand_tensor, reference as r, to_f64, FD_EPS};
use inrpatch_core::tensor::{Rng, Tape, Taps, Tensor, Var};
use inrpatch_core::Result;

pub const OPS: &[&str] = &[
    "matmul",
    "add",
    "add_row_broadcast",
    "sub_grouped",
    "mul_grouped",
    "mul_same",
    "scale",
    "sum",
    "mean",
    "row_sum",
    "leaky_relu",
    "sin",
    "cos",
    "sigmoid",
    "softplus",
    "sqrt",
    "sq_diff_mean",
    "conv2d_k4_s2_p1",
    "conv2d_k3_s2_p1",
    "conv2d_k3_s1_p0",
    "concat_cols",
    "gather",
    "rows_to_nchw",
    "avg_pool2",
    "reshape",
];

type TapeFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type RefFn = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

struct Case {
    inputs: Vec<Tensor>,
    tape_fn: TapeFn,
    ref_fn: RefFn,
}

fn positive(t: Tensor) -> Tensor {
    let data = t.data().iter().map(|v| v.abs() + 0.5).collect();
    Tensor::from_vec(t.shape(), data).unwrap()
}

/// Pushes every entry at least 0.05 away from zero so ±ε never crosses a kink.
fn off_zero(t: Tensor) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
        .collect();
    Tensor::from_vec(t.shape(), data).unwrap()
}

fn case(name: &str, rng: &mut Rng) -> Case {
    let mut t = |s: &[usize]| rand_tensor(s, rng, 1.0);
    match name {
        "matmul" => Case {
            inputs: vec![t(&[3, 4]), t(&[4, 5])],
            tape_fn: Box::new(|tp, v| tp.matmul(v[0], v[1])),
            ref_fn: Box::new(|x| r::matmul(&x[0], &x[1], 3, 4, 5)),
        },
        "add" => Case {
            inputs: vec![t(&[3, 4]), t(&[3, 4])],
            tape_fn: Box::new(|tp, v| tp.add(v[0], v[1])),
            ref_fn: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
        },
        "add_row_broadcast" => Case {
            inputs: vec![t(&[6, 3]), t(&[1, 3])],
            tape_fn: Box::new(|tp, v| tp.add(v[0], v[1])),
            ref_fn: Box::new(|x| (0..18).map(|i| x[0][i] + x[1][i % 3]).collect()),
        },
        "sub_grouped" => Case {
            inputs: vec![t(&[6, 3]), t(&[2, 3])],
            tape_fn: Box::new(|tp, v| tp.sub(v[0], v[1])),
            ref_fn: Box::new(|x| (0..18).map(|i| x[0][i] - x[1][(i / 9) * 3 + i % 3]).collect()),
        },
        "mul_grouped" => Case {
            inputs: vec![t(&[6, 3]), t(&[3, 3])],
            tape_fn: Box::new(|tp, v| tp.mul(v[0], v[1])),
            ref_fn: Box::new(|x| (0..18).map(|i| x[0][i] * x[1][(i / 6) * 3 + i % 3]).collect()),
        },
        "mul_same" => Case {
            inputs: vec![t(&[2, 5]), t(&[2, 5])],
            tape_fn: Box::new(|tp, v| tp.mul(v[0], v[1])),
            ref_fn: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
        },
        "scale" => Case {
            inputs: vec![t(&[7])],
            tape_fn: Box::new(|tp, v| tp.scale(v[0], -2.5)),
            ref_fn: Box::new(|x| x[0].iter().map(|a| a * -2.5f32 as f64).collect()),
        },
        "sum" => Case {
            inputs: vec![t(&[2, 3])],
            tape_fn: Box::new(|tp, v| tp.sum(v[0])),
            ref_fn: Box::new(|x| vec![x[0].iter().sum()]),
        },
        "mean" => Case {
            inputs: vec![t(&[2, 3])],
            tape_fn: Box::new(|tp, v| tp.mean(v[0])),
            ref_fn: Box::new(|x| vec![x[0].iter().sum::<f64>() / 6.0]),
        },
        "row_sum" => Case {
            inputs: vec![t(&[3, 2, 2])],
            tape_fn: Box::new(|tp, v| tp.row_sum(v[0])),
            ref_fn: Box::new(|x| x[0].chunks(4).map(|c| c.iter().sum()).collect()),
        },
        "leaky_relu" => Case {
            inputs: vec![off_zero(t(&[10]))],
            tape_fn: Box::new(|tp, v| tp.leaky_relu(v[0], 0.2)),
            ref_fn: Box::new(|x| x[0].iter().map(|&a| r::leaky(a, 0.2f32 as f64)).collect()),
        },
        "sin" => Case {
            inputs: vec![t(&[8])],
            tape_fn: Box::new(|tp, v| tp.sin(v[0])),
            ref_fn: Box::new(|x| x[0].iter().map(|a| a.sin()).collect()),
        },
        "cos" => Case {
            inputs: vec![t(&[8])],
            tape_fn: Box::new(|tp, v| tp.cos(v[0])),
            ref_fn: Box::new(|x| x[0].iter().map(|a| a.cos()).collect()),
        },
        "sigmoid" => Case {
            inputs: vec![t(&[8])],
            tape_fn: Box::new(|tp, v| tp.sigmoid(v[0])),
            ref_fn: Box::new(|x| x[0].iter().map(|&a| r::sigmoid(a)).collect()),
        },
        "softplus" => Case {
            inputs: vec![t(&[8])],
            tape_fn: Box::new(|tp, v| tp.softplus(v[0])),
            ref_fn: Box::new(|x| x[0].iter().map(|&a| r::softplus(a)).collect()),
        },
        "sqrt" => Case {
            inputs: vec![positive(t(&[8]))],
            tape_fn: Box::new(|tp, v| tp.sqrt(v[0])),
            ref_fn: Box::new(|x| x[0].iter().map(|a| a.sqrt()).collect()),
        },
        "sq_diff_mean" => Case {
            inputs: vec![t(&[2, 4]), t(&[2, 4])],
            tape_fn: Box::new(|tp, v| tp.sq_diff_mean(v[0], v[1])),
            ref_fn: Box::new(|x| vec![x[0].iter().zip(&x[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 8.0]),
        },
        "conv2d_k4_s2_p1" => Case {
            inputs: vec![t(&[2, 3, 6, 6]), t(&[4, 3, 4, 4])],
            tape_fn: Box::new(|tp, v| tp.conv2d(v[0], v[1], 2, 1)),
            ref_fn: Box::new(|x| r::conv2d(&x[0], &x[1], 2, 3, 6, 6, 4, 4, 2, 1).0),
        },
        "conv2d_k3_s2_p1" => Case {
            inputs: vec![t(&[2, 2, 6, 6]), t(&[3, 2, 3, 3])],
            tape_fn: Box::new(|tp, v| tp.conv2d(v[0], v[1], 2, 1)),
            ref_fn: Box::new(|x| r::conv2d(&x[0], &x[1], 2, 2, 6, 6, 3, 3, 2, 1).0),
        },
        "conv2d_k3_s1_p0" => Case {
            inputs: vec![t(&[1, 2, 5, 5]), t(&[3, 2, 3, 3])],
            tape_fn: Box::new(|tp, v| tp.conv2d(v[0], v[1], 1, 0)),
            ref_fn: Box::new(|x| r::conv2d(&x[0], &x[1], 1, 2, 5, 5, 3, 3, 1, 0).0),
        },
        "concat_cols" => Case {
            inputs: vec![t(&[3, 2]), t(&[3, 1]), t(&[3, 3])],
            tape_fn: Box::new(|tp, v| tp.concat_cols(v)),
            ref_fn: Box::new(|x| {
                let mut out = Vec::new();
                for row in 0..3 {
                    out.extend_from_slice(&x[0][row * 2..row * 2 + 2]);
                    out.extend_from_slice(&x[1][row..row + 1]);
                    out.extend_from_slice(&x[2][row * 3..row * 3 + 3]);
                }
                out
            }),
        },
        "gather" => {
            let mut taps = Taps::new();
            taps.push_row(&[(2, 1.0)]);
            taps.push_row(&[(0, 0.25), (1, 0.75)]);
            taps.push_row(&[]);
            taps.push_row(&[(1, 0.5), (1, 0.5), (3, 0.3), (0, 0.2)]);
            let taps = Rc::new(taps);
            let tt = taps.clone();
            Case {
                inputs: vec![t(&[4, 3])],
                tape_fn: Box::new(move |tp, v| tp.gather(v[0], tt.clone())),
                ref_fn: Box::new(move |x| {
                    let mut out = vec![0.0; 12];
                    for o in 0..4 {
                        for &(i, w) in taps.row(o) {
                            for c in 0..3 {
                                out[o * 3 + c] += w as f64 * x[0][i as usize * 3 + c];
                            }
                        }
                    }
                    out
                }),
            }
        }
        "rows_to_nchw" => Case {
            inputs: vec![t(&[2 * 9, 3])],
            tape_fn: Box::new(|tp, v| tp.rows_to_nchw(v[0], 2, 3)),
            ref_fn: Box::new(|x| {
                let mut out = vec![0.0; 54];
                for b in 0..2 {
                    for p in 0..9 {
                        for c in 0..3 {
                            out[(b * 3 + c) * 9 + p] = x[0][(b * 9 + p) * 3 + c];
                        }
                    }
                }
                out
            }),
        },
        "avg_pool2" => Case {
            inputs: vec![t(&[2, 3, 4, 6])],
            tape_fn: Box::new(|tp, v| tp.avg_pool2(v[0])),
            ref_fn: Box::new(|x| r::avg_pool2(&x[0], 6, 4, 6)),
        },
        "reshape" => Case {
            inputs: vec![t(&[2, 6])],
            tape_fn: Box::new(|tp, v| tp.reshape(v[0], &[3, 4])),
            ref_fn: Box::new(|x| x[0].clone()),
        },
        other => panic!("no case {other}"),
    }
}

/// Projects the op output onto a fixed random direction so every output
/// entry contributes to the scalar being differentiated.
pub fn check(name: &str, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let c = case(name, &mut rng);
    let mut tape = Tape::new();
    let vars: Vec<Var> = c.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (c.tape_fn)(&mut tape, &vars).unwrap();
    let shape = tape.value(out).shape().to_vec();
    let proj = rand_tensor(&shape, &mut rng, 1.0);
    let proj64 = to_f64(&proj);
    let pv = tape.constant(proj);
    let prod = tape.mul(out, pv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = c.inputs.iter().map(to_f64).collect();
    let mut worst: f64 = 0.0;
    for (j, v) in vars.iter().enumerate() {
        let numeric = central_diff(
            &base[j],
            FD_EPS,
            |xj| {
                let mut xs = base.clone();
                xs[j] = xj.to_vec();
                (c.ref_fn)(&xs).iter().zip(&proj64).map(|(a, b)| a * b).sum()
            },
            |_, _| true,
        );
        let (e, _) = max_rel_err(grads.get(*v).unwrap(), &numeric);
        worst = worst.max(e);
    }
    worst
}
