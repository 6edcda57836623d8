//! Finite-difference validation of the reverse-mode gradients, from single
//! layers up through the full embed-extract loss.
//!
//! Per-coordinate differences drown in f32 arithmetic noise for the tiny
//! gradients this network produces, so every check is a directional
//! derivative: perturb the whole tensor along a seeded random direction and
//! compare against the inner product with the analytic gradient.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wavemark::graph::Tape;
use wavemark::model::{
    embed_graph, extract_graph, init_parameters, ForwardPass, Mode, ModelParameters,
    PipelineConfig, WatermarkBits,
};
use wavemark::ops::batchnorm::BatchNormParams;
use wavemark::ops::conv::{ConvLayerParams, Padding};
use wavemark::tensor::Tensor;
use wavemark::wavelet::BandId;

fn rand_tensor(shape: &[usize], seed: u64, scale: f32) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn axpy(base: &Tensor, dir: &Tensor, h: f32) -> Tensor {
    Tensor::from_fn(base.shape(), |i| base[i] + h * dir[i])
}

/// Compare `d/dh loss(base + h*dir)` at 0 against `<grad, dir>` for two
/// seeded directions. The step is scaled so the loss moves by a measurable
/// amount without leaving the locally linear regime.
fn fd_check(name: &str, loss: &mut dyn FnMut(&Tensor) -> f32, base: &Tensor, grad: &Tensor, tol: f64) {
    fd_check_dirs(name, loss, base, grad, tol, 2)
}

fn fd_check_dirs(
    name: &str,
    loss: &mut dyn FnMut(&Tensor) -> f32,
    base: &Tensor,
    grad: &Tensor,
    tol: f64,
    dirs: usize,
) {
    assert_eq!(grad.shape(), base.shape(), "{name}: gradient shape");
    // Probe along the gradient itself (largest signal-to-noise ratio) and
    // one sparse random direction. Dense random directions either flip too
    // many ReLU signs at once or land nearly orthogonal to small gradients.
    let max_abs = grad.data().iter().fold(0.0f32, |a, v| a.max(v.abs())).max(1e-12);
    let grad_dir = grad.map(|v| v / max_abs);
    let sparse_dir = {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let nnz = base.len().min(256);
        let mut d = Tensor::zeros(base.shape());
        for _ in 0..nnz {
            let i = rng.gen_range(0..base.len());
            d[i] = if rng.gen_range(0..2) == 0 { -1.0 } else { 1.0 };
        }
        d
    };
    for (seed, dir) in [(0usize, grad_dir), (1, sparse_dir)].into_iter().take(dirs) {
        let analytic = dot(grad, &dir);
        let h = (1e-3 / analytic.abs().max(1e-3)).clamp(1e-4, 1e-2) as f32;
        let mut central = |h: f32| {
            (loss(&axpy(base, &dir, h)) as f64 - loss(&axpy(base, &dir, -h)) as f64)
                / (2.0 * h as f64)
        };
        // Richardson extrapolation cancels the quadratic truncation term
        let (d1, d2) = (central(h), central(h / 2.0));
        let numeric = (4.0 * d2 - d1) / 3.0;
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        let err = (analytic - numeric).abs() / denom;
        assert!(
            err < tol,
            "{name} (dir {seed}): analytic {analytic} vs numeric {numeric} (rel {err})"
        );
    }
}

/// Scalar readout used by all layer checks: mean of squares of the output.
fn half_sq_loss(tape: &mut Tape, y: wavemark::graph::VarId) -> f32 {
    let zeros = tape.constant(Tensor::zeros(tape.value(y).shape()));
    let loss = tape.mse(y, zeros, "readout").unwrap();
    tape.value(loss).item()
}

fn input_grad_check(
    name: &str,
    apply: &mut dyn FnMut(&mut Tape, wavemark::graph::VarId) -> wavemark::graph::VarId,
    x0: &Tensor,
) {
    let grad = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x0.clone(), true);
        let y = apply(&mut tape, xv);
        let zeros = tape.constant(Tensor::zeros(tape.value(y).shape()));
        let loss = tape.mse(y, zeros, "readout").unwrap();
        let grads = tape.backward(loss).unwrap();
        grads.get(xv).unwrap().clone()
    };
    fd_check(
        name,
        &mut |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let y = apply(&mut tape, xv);
            half_sq_loss(&mut tape, y)
        },
        x0,
        &grad,
        1e-2,
    );
}

#[test]
fn conv_input_gradients() {
    let x = rand_tensor(&[1, 3, 8, 8], 1, 0.8);
    let layer = ConvLayerParams {
        kernels: rand_tensor(&[4, 3, 3, 3], 2, 0.4),
        bias: rand_tensor(&[4], 3, 0.2),
    };
    for stride in [1usize, 2] {
        let l = layer.clone();
        input_grad_check(
            &format!("conv stride {stride} input"),
            &mut move |tape, xv| {
                let w = tape.constant(l.kernels.clone());
                let b = tape.constant(l.bias.clone());
                tape.conv2d(xv, &l, w, b, stride, Padding::Same, "conv").unwrap()
            },
            &x,
        );
    }
}

#[test]
fn conv_weight_and_bias_gradients() {
    let x = rand_tensor(&[1, 2, 6, 6], 4, 0.8);
    let k0 = rand_tensor(&[3, 2, 3, 3], 6, 0.4);
    let b0 = rand_tensor(&[3], 5, 0.2);

    // forward reads weights from the layer struct, so vary the struct
    let run = |kernels: &Tensor, bias: &Tensor, trainable: bool| -> (f32, Option<(Tensor, Tensor)>) {
        let layer = ConvLayerParams { kernels: kernels.clone(), bias: bias.clone() };
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.leaf(layer.kernels.clone(), trainable);
        let b = tape.leaf(layer.bias.clone(), trainable);
        let y = tape.conv2d(xv, &layer, w, b, 1, Padding::Same, "conv").unwrap();
        let zeros = tape.constant(Tensor::zeros(tape.value(y).shape()));
        let loss = tape.mse(y, zeros, "readout").unwrap();
        let value = tape.value(loss).item();
        if trainable {
            let grads = tape.backward(loss).unwrap();
            let gw = grads.get(w).unwrap().clone();
            let gb = grads.get(b).unwrap().clone();
            (value, Some((gw, gb)))
        } else {
            (value, None)
        }
    };
    let (_, g) = run(&k0, &b0, true);
    let (gw, gb) = g.unwrap();
    fd_check("conv kernels", &mut |k| run(k, &b0, false).0, &k0, &gw, 1e-2);
    fd_check("conv bias", &mut |b| run(&k0, b, false).0, &b0, &gb, 1e-2);
}

#[test]
fn conv_transpose_gradients() {
    let x = rand_tensor(&[1, 4, 5, 5], 7, 0.8);
    let layer = ConvLayerParams {
        kernels: rand_tensor(&[2, 4, 3, 3], 8, 0.4),
        bias: rand_tensor(&[2], 9, 0.2),
    };
    let l = layer.clone();
    input_grad_check(
        "conv_transpose stride 2 input",
        &mut move |tape, xv| {
            let w = tape.constant(l.kernels.clone());
            let b = tape.constant(l.bias.clone());
            tape.conv_transpose2d(xv, &l, w, b, 2, "convt").unwrap()
        },
        &x,
    );

    // kernel gradient through the struct
    let run = |kernels: &Tensor, trainable: bool| -> (f32, Option<Tensor>) {
        let l = ConvLayerParams { kernels: kernels.clone(), bias: layer.bias.clone() };
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.leaf(l.kernels.clone(), trainable);
        let b = tape.constant(l.bias.clone());
        let y = tape.conv_transpose2d(xv, &l, w, b, 2, "convt").unwrap();
        let zeros = tape.constant(Tensor::zeros(tape.value(y).shape()));
        let loss = tape.mse(y, zeros, "readout").unwrap();
        let value = tape.value(loss).item();
        let g = trainable.then(|| tape.backward(loss).unwrap().get(w).unwrap().clone());
        (value, g)
    };
    let (_, g) = run(&layer.kernels, true);
    fd_check(
        "conv_transpose kernels",
        &mut |k| run(k, false).0,
        &layer.kernels,
        &g.unwrap(),
        1e-2,
    );
}

#[test]
fn batchnorm_gradients() {
    let x0 = rand_tensor(&[2, 3, 4, 4], 10, 1.0);
    let gamma0 = rand_tensor(&[3], 11, 0.5).map(|v| v + 1.0);
    let beta0 = rand_tensor(&[3], 12, 0.3);

    let run = |x: &Tensor, gamma: &Tensor, beta: &Tensor, want: Option<u8>| -> (f32, Option<Tensor>) {
        let mut bn = BatchNormParams::new(3);
        bn.gamma = gamma.clone();
        bn.beta = beta.clone();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let g = tape.leaf(gamma.clone(), true);
        let b = tape.leaf(beta.clone(), true);
        let y = tape.batchnorm_train(xv, g, b, &mut bn, "bn").unwrap();
        let zeros = tape.constant(Tensor::zeros(tape.value(y).shape()));
        let loss = tape.mse(y, zeros, "readout").unwrap();
        let value = tape.value(loss).item();
        let grad = want.map(|which| {
            let grads = tape.backward(loss).unwrap();
            let id = [xv, g, b][which as usize];
            grads.get(id).unwrap().clone()
        });
        (value, grad)
    };
    let gx = run(&x0, &gamma0, &beta0, Some(0)).1.unwrap();
    fd_check("batchnorm input", &mut |x| run(x, &gamma0, &beta0, None).0, &x0, &gx, 1e-2);
    let gg = run(&x0, &gamma0, &beta0, Some(1)).1.unwrap();
    fd_check("batchnorm gamma", &mut |g| run(&x0, g, &beta0, None).0, &gamma0, &gg, 1e-2);
    let gb = run(&x0, &gamma0, &beta0, Some(2)).1.unwrap();
    fd_check("batchnorm beta", &mut |b| run(&x0, &gamma0, b, None).0, &beta0, &gb, 1e-2);
}

#[test]
fn activation_pool_wavelet_gradients() {
    let x = rand_tensor(&[1, 2, 8, 8], 13, 0.9);
    input_grad_check("tanh", &mut |tape, xv| tape.tanh(xv, "tanh"), &x);
    input_grad_check("sigmoid", &mut |tape, xv| tape.sigmoid(xv, "sig"), &x);
    input_grad_check("avgpool", &mut |tape, xv| tape.avgpool2d(xv, "pool").unwrap(), &x);
    let x = rand_tensor(&[1, 1, 8, 8], 14, 0.9);
    input_grad_check(
        "dwt band-replace round trip",
        &mut |tape, xv| {
            let bands = tape.dwt2(xv).unwrap();
            let sub = tape.band_select(bands, 0).unwrap();
            let scaled = tape.affine(sub, 0.7, 0.1, "affine");
            let replaced = tape.band_replace(bands, 0, scaled).unwrap();
            tape.idwt2(replaced).unwrap()
        },
        &x,
    );
}

fn pipeline_loss(
    params: &ModelParameters,
    config: &PipelineConfig,
    host_plane: &Tensor,
    wm_plane: &Tensor,
    target: &Tensor,
) -> f32 {
    let mut tape = Tape::new();
    let host = tape.constant(host_plane.clone());
    let wm = tape.constant(wm_plane.clone());
    let tgt = tape.constant(target.clone());
    let mut run = params.clone();
    let mut fp = ForwardPass::new(&mut tape, Mode::Train, false);
    let marked = embed_graph(&mut fp, &mut run, config, host, wm).unwrap();
    let soft = extract_graph(&mut fp, &mut run, config, marked).unwrap();
    let l1 = fp.tape.mse(host, marked, "l1").unwrap();
    let l2 = fp.tape.mae(tgt, soft, "l2").unwrap();
    let l3 = fp.tape.weighted_sum(l1, 33.0, l2, 0.2);
    tape.value(l3).item()
}

/// End-to-end check: analytic d(loss)/d(param) from the tape matches a
/// directional finite difference for parameters from every network stage.
#[test]
fn full_pipeline_parameter_gradients() {
    let config = PipelineConfig::default();
    let params = init_parameters(21, BandId::Ll);
    // smooth mid-range host keeps the output clamp inactive
    let host_plane = Tensor::from_fn(&[1, 1, 256, 256], |i| {
        let (y, x) = (i / 256, i % 256);
        0.5 + 0.2 * ((x as f32) * 0.05).sin() * ((y as f32) * 0.04).cos()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let wm = WatermarkBits::random(&mut rng);
    let wm_plane = wm.to_plane();
    let target = Tensor::from_fn(&[1, 256], |i| wm.bits()[i] as f32);

    // analytic gradients once
    let mut tape = Tape::new();
    let host = tape.constant(host_plane.clone());
    let wmv = tape.constant(wm_plane.clone());
    let tgt = tape.constant(target.clone());
    let mut run = params.clone();
    let mut fp = ForwardPass::new(&mut tape, Mode::Train, true);
    let marked = embed_graph(&mut fp, &mut run, &config, host, wmv).unwrap();
    let soft = extract_graph(&mut fp, &mut run, &config, marked).unwrap();
    let l1 = fp.tape.mse(host, marked, "l1").unwrap();
    let l2 = fp.tape.mae(tgt, soft, "l2").unwrap();
    let l3 = fp.tape.weighted_sum(l1, 33.0, l2, 0.2);
    let param_vars = fp.param_vars().to_vec();
    let grads = tape.backward(l3).unwrap();
    let grad_of = |name: &str| {
        let mut acc: Option<Tensor> = None;
        for (n, v) in &param_vars {
            if n == name {
                if let Some(g) = grads.get(*v) {
                    match &mut acc {
                        Some(a) => {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                        None => acc = Some(g.clone()),
                    }
                }
            }
        }
        acc.expect(name)
    };

    let probes = [
        "host_pre.kernels",
        "wm_pre.1.conv.kernels",
        "embed.0.bn.gamma",
        "embed_out.bias",
        "extract.1.conv.kernels",
        "extract_out.kernels",
    ];
    for name in probes {
        let grad = grad_of(name);
        let base = {
            let mut p = params.clone();
            let mut base = None;
            for (n, t) in p.trainable_tensors_mut() {
                if n == name {
                    base = Some(t.clone());
                }
            }
            base.expect(name)
        };
        // a single high-signal probe per parameter: sparse random probes
        // cannot beat f32 forward noise through the deep transposed-conv
        // stack at full resolution
        fd_check_dirs(
            name,
            &mut |varied: &Tensor| {
                let mut p = params.clone();
                for (n, t) in p.trainable_tensors_mut() {
                    if n == name {
                        *t = varied.clone();
                    }
                }
                pipeline_loss(&p, &config, &host_plane, &wm_plane, &target)
            },
            &base,
            &grad,
            1e-2,
            1,
        );
    }
}
