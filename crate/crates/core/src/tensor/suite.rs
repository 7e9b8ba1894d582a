use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradient_check, gru_forward, Conv2dSpec, GradCheckReport, Graph, GruVars, Padding, Result, Tensor, TensorError, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Runs the finite-difference checker over every differentiable graph op
/// (and the GRU built from them) on small random inputs.
pub fn op_gradient_suite(seed: u64, tol: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    type Case = (&'static str, Box<dyn Fn(&mut Graph, &[Var]) -> std::result::Result<Var, TensorError>>, Vec<Tensor>);
    let pos = Tensor::new(vec![2, 3], (0..6).map(|i| 0.5 + 0.3 * i as f64).collect()).unwrap();
    let cases: Vec<Case> = vec![
        ("add", Box::new(|g, v| { let a = g.add(v[0], v[1])?; let b = g.mul(a, a)?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3])]),
        ("sub", Box::new(|g, v| { let a = g.sub(v[0], v[1])?; let b = g.mul(a, a)?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3])]),
        ("mul", Box::new(|g, v| { let a = g.mul(v[0], v[1])?; g.sum_all(a) }), vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3])]),
        ("scale", Box::new(|g, v| { let a = g.scale(v[0], -1.7)?; let b = g.mul(a, v[0])?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[4])]),
        ("add_scalar", Box::new(|g, v| { let a = g.add_scalar(v[0], 0.3)?; let b = g.mul(a, a)?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[4])]),
        ("relu", Box::new(|g, v| { let a = g.relu(v[0])?; let b = g.mul(a, a)?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[6])]),
        ("leaky_relu", Box::new(|g, v| { let a = g.leaky_relu(v[0], 0.2)?; let b = g.mul(a, a)?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[6])]),
        ("sigmoid", Box::new(|g, v| { let a = g.sigmoid(v[0])?; let b = g.mul(a, a)?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[6])]),
        ("tanh", Box::new(|g, v| { let a = g.tanh(v[0])?; let b = g.mul(a, a)?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[6])]),
        ("exp", Box::new(|g, v| { let a = g.exp(v[0])?; g.sum_all(a) }), vec![rand_tensor(&mut rng, &[6])]),
        ("log", Box::new(|g, v| { let a = g.log(v[0])?; let b = g.mul(a, a)?; g.sum_all(b) }), vec![pos]),
        ("neg", Box::new(|g, v| { let a = g.neg(v[0])?; let b = g.mul(a, v[0])?; let c = g.mul(b, v[0])?; g.sum_all(c) }), vec![rand_tensor(&mut rng, &[6])]),
        ("abs", Box::new(|g, v| { let a = g.abs(v[0])?; let b = g.mul(a, v[1])?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[6]), rand_tensor(&mut rng, &[6])]),
        ("clamp", Box::new(|g, v| { let a = g.clamp(v[0], -0.5, 0.5)?; let b = g.mul(a, a)?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[8])]),
        ("matmul", Box::new(|g, v| { let a = g.matmul(v[0], v[1])?; let b = g.mul(a, a)?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])]),
        ("conv2d", Box::new(|g, v| {
            let pad = Padding::same((6, 5), (4, 4), (2, 1));
            let a = g.conv2d(v[0], v[1], Conv2dSpec { stride: (2, 1), padding: pad })?;
            let b = g.mul(a, a)?; g.sum_all(b)
        }), vec![rand_tensor(&mut rng, &[2, 6, 5]), rand_tensor(&mut rng, &[3, 2, 4, 4])]),
        ("conv_transpose2d", Box::new(|g, v| {
            let pad = Padding::same((6, 6), (4, 4), (2, 2));
            let a = g.conv_transpose2d(v[0], v[1], Conv2dSpec { stride: (2, 2), padding: pad }, (6, 6))?;
            let b = g.mul(a, a)?; g.sum_all(b)
        }), vec![rand_tensor(&mut rng, &[3, 3, 3]), rand_tensor(&mut rng, &[3, 2, 4, 4])]),
        ("instance_norm", Box::new(|g, v| { let a = g.instance_norm(v[0], 1e-5)?; let b = g.mul(a, v[1])?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[2, 3, 4])]),
        ("channel_affine", Box::new(|g, v| { let a = g.channel_affine(v[0], v[1], v[2])?; let b = g.mul(a, a)?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[2, 3, 2]), rand_tensor(&mut rng, &[2]), rand_tensor(&mut rng, &[2])]),
        ("concat", Box::new(|g, v| { let a = g.concat(&[v[0], v[1]], 1)?; let b = g.mul(a, a)?; let c = g.mul(b, a)?; g.sum_all(c) }), vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 1])]),
        ("slice", Box::new(|g, v| { let a = g.slice(v[0], 1, 1, 2)?; let b = g.mul(a, a)?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[2, 4, 2])]),
        ("sum_axes", Box::new(|g, v| { let a = g.sum(v[0], &[0, 2])?; let b = g.mul(a, a)?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[2, 3, 2])]),
        ("mean", Box::new(|g, v| { let a = g.mean(v[0], &[1])?; let b = g.mul(a, a)?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[2, 3])]),
        ("reshape", Box::new(|g, v| { let a = g.reshape(v[0], &[3, 2])?; let b = g.mul(a, v[1])?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[3, 2])]),
        ("permute", Box::new(|g, v| { let a = g.permute(v[0], &[2, 0, 1])?; let b = g.mul(a, v[1])?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[4, 2, 3])]),
        ("tile_spatial", Box::new(|g, v| { let a = g.tile_spatial(v[0], 2, 3)?; let b = g.mul(a, v[1])?; g.sum_all(b) }), vec![rand_tensor(&mut rng, &[2]), rand_tensor(&mut rng, &[2, 2, 3])]),
    ];
    let shapes: [&[usize]; 11] = [&[2, 3], &[2, 3], &[2, 3], &[3, 3], &[3, 3], &[3, 3], &[3], &[3], &[3], &[1, 2], &[1, 2]];
    let gru_inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    let mut cases = cases;
    cases.push((
        "gru",
        Box::new(|g, v| {
            let vars = GruVars { w: [v[0], v[1], v[2]], u: [v[3], v[4], v[5]], b: [v[6], v[7], v[8]] };
            let (_, last) = gru_forward(g, &vars, &[v[9], v[10]])?;
            g.sum_all(last)
        }),
        gru_inputs,
    ));
    cases.into_iter().map(|(name, f, inputs)| Ok((name, gradient_check(f, &inputs, tol)?))).collect()
}
