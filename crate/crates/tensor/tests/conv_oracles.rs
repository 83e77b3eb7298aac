use longscape_tensor::kernels::{conv2d, conv2d_input_grad, conv2d_weight_grad};
use longscape_tensor::{Conv2dGeom, Tape, Tensor};

/// Direct nested-loop cross-correlation.
fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, g: &Conv2dGeom) -> Tensor<f64> {
    let [b, c, h, wd] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [o, _, kh, kw] = <[usize; 4]>::try_from(w.shape()).unwrap();
    let oh = (h + 2 * g.padding.0 - g.dilation.0 * (kh - 1) - 1) / g.stride.0 + 1;
    let ow = (wd + 2 * g.padding.1 - g.dilation.1 * (kw - 1) - 1) / g.stride.1 + 1;
    let mut y = vec![0.0; b * o * oh * ow];
    for n in 0..b {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (i * g.stride.0 + ki * g.dilation.0) as isize - g.padding.0 as isize;
                                let iw = (j * g.stride.1 + kj * g.dilation.1) as isize - g.padding.1 as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((n * c + ic) * h + ih as usize) * wd + iw as usize]
                                    * w.data()[((oc * c + ic) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    y[((n * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[b, o, oh, ow], y).unwrap()
}

/// Direct scatter definition of the transposed convolution, weight `C_in x C_out x Kh x Kw`.
fn conv_transpose_reference(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [b, c, h, wd] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [_, o, kh, kw] = <[usize; 4]>::try_from(w.shape()).unwrap();
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut y = vec![0.0; b * o * oh * ow];
    for n in 0..b {
        for ic in 0..c {
            for i in 0..h {
                for j in 0..wd {
                    let v = x.data()[((n * c + ic) * h + i) * wd + j];
                    for oc in 0..o {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let yi = (i * stride + ki) as isize - pad as isize;
                                let yj = (j * stride + kj) as isize - pad as isize;
                                if yi < 0 || yj < 0 || yi >= oh as isize || yj >= ow as isize {
                                    continue;
                                }
                                y[((n * o + oc) * oh + yi as usize) * ow + yj as usize] +=
                                    v * w.data()[((ic * o + oc) * kh + ki) * kw + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, o, oh, ow], y).unwrap()
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// (in_channels, out_channels, in_hw, kernel, geometry) for every convolution
/// geometry the generator and critics use, at reduced channel counts.
fn architecture_configs() -> Vec<(usize, usize, (usize, usize), (usize, usize), Conv2dGeom)> {
    let g = Conv2dGeom::new;
    vec![
        (3, 4, (16, 16), (4, 4), g((2, 2), (1, 1), (1, 1))),
        (4, 5, (8, 16), (4, 4), g((2, 2), (1, 1), (1, 1))),
        (6, 3, (8, 8), (1, 1), g((1, 1), (0, 0), (1, 1))),
        (3, 3, (8, 8), (3, 3), g((1, 1), (1, 1), (1, 1))),
        (3, 3, (8, 8), (3, 3), g((2, 2), (1, 1), (1, 1))),
        (4, 6, (8, 8), (1, 1), g((2, 2), (0, 0), (1, 1))),
        (3, 3, (4, 8), (1, 7), g((1, 1), (0, 3), (1, 1))),
        (3, 3, (4, 8), (1, 7), g((1, 1), (0, 6), (1, 2))),
        (3, 3, (4, 16), (1, 7), g((1, 1), (0, 12), (1, 4))),
        (3, 3, (4, 8), (3, 1), g((1, 1), (1, 0), (1, 1))),
        (3, 3, (4, 8), (1, 7), g((1, 1), (0, 12), (1, 4))),
        (3, 3, (1, 2), (1, 7), g((1, 1), (0, 3), (1, 1))),
    ]
}

fn random_configs() -> Vec<(usize, usize, (usize, usize), (usize, usize), Conv2dGeom)> {
    let g = Conv2dGeom::new;
    vec![
        (2, 3, (5, 5), (3, 3), g((1, 1), (2, 2), (2, 2))),
        (3, 2, (7, 6), (2, 3), g((2, 1), (1, 0), (1, 2))),
        (1, 4, (9, 9), (5, 5), g((3, 3), (2, 2), (1, 1))),
        (2, 2, (6, 11), (3, 2), g((1, 3), (0, 1), (2, 1))),
        (4, 3, (10, 7), (3, 3), g((2, 2), (3, 1), (2, 3))),
    ]
}

#[test]
fn conv2d_matches_nested_loops() {
    for (seed, (c, o, hw, k, geom)) in architecture_configs().into_iter().chain(random_configs()).enumerate() {
        let x = Tensor::<f64>::randn(&[2, c, hw.0, hw.1], 1.0, seed as u64).unwrap();
        let w = Tensor::<f64>::randn(&[o, c, k.0, k.1], 1.0, 100 + seed as u64).unwrap();
        let got = conv2d(&x, &w, &geom).unwrap();
        let want = conv_reference(&x, &w, &geom);
        let err = max_diff(&got, &want);
        assert!(err <= 1e-10, "config {seed}: {geom:?} max diff {err:e}");
    }
}

#[test]
fn dilated_example_matches_reference() {
    let g = Conv2dGeom::new((1, 1), (2, 2), (2, 2));
    let x = Tensor::<f64>::randn(&[1, 2, 5, 5], 1.0, 7).unwrap();
    let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, 8).unwrap();
    let got = conv2d(&x, &w, &g).unwrap();
    assert_eq!(got.shape(), &[1, 3, 5, 5]);
    assert!(max_diff(&got, &conv_reference(&x, &w, &g)) <= 1e-10);
}

#[test]
fn identity_kernel_preserves_input() {
    let x = Tensor::<f64>::randn(&[2, 1, 6, 5], 1.0, 3).unwrap();
    let w = Tensor::<f64>::ones(&[1, 1, 1, 1]).unwrap();
    assert_eq!(conv2d(&x, &w, &Conv2dGeom::default()).unwrap(), x);
}

#[test]
fn first_encoder_conv_shape() {
    let x = Tensor::<f32>::zeros(&[1, 3, 128, 128]).unwrap();
    let w = Tensor::<f32>::zeros(&[64, 3, 4, 4]).unwrap();
    let y = conv2d(&x, &w, &Conv2dGeom::strided(2, 1)).unwrap();
    assert_eq!(y.shape(), &[1, 64, 64, 64]);
}

#[test]
fn conv_transpose_matches_scatter_reference() {
    let cases = [(3, 2, (2, 2), 4, 2, 1), (2, 3, (4, 8), 4, 2, 1), (2, 2, (3, 5), 3, 1, 1), (1, 2, (3, 3), 3, 2, 0)];
    for (seed, (c, o, hw, k, s, p)) in cases.into_iter().enumerate() {
        let tape = Tape::new();
        let x = Tensor::<f64>::randn(&[2, c, hw.0, hw.1], 1.0, seed as u64).unwrap();
        let w = Tensor::<f64>::randn(&[c, o, k, k], 1.0, 50 + seed as u64).unwrap();
        let got = tape
            .constant(x.clone())
            .conv_transpose2d(&tape.constant(w.clone()), s, p)
            .unwrap();
        let want = conv_transpose_reference(&x, &w, s, p);
        assert!(max_diff(got.value(), &want) <= 1e-10, "case {seed}");
    }
}

#[test]
fn conv_transpose_shapes() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]).unwrap());
    let w = tape.constant(Tensor::zeros(&[1, 1, 4, 4]).unwrap());
    assert_eq!(x.conv_transpose2d(&w, 2, 1).unwrap().shape(), &[1, 1, 4, 4]);

    let x = tape.constant(Tensor::zeros(&[1, 1024, 4, 8]).unwrap());
    let w = tape.constant(Tensor::zeros(&[1024, 512, 4, 4]).unwrap());
    assert_eq!(x.conv_transpose2d(&w, 2, 1).unwrap().shape(), &[1, 512, 8, 16]);
}

#[test]
fn conv_transpose_equals_conv_input_gradient() {
    // The gradient of <conv2d(x, w), u> with respect to x is the transposed
    // convolution of u, obtained here through the tape.
    for (seed, (c, o, hw, k, geom)) in architecture_configs().into_iter().chain(random_configs()).enumerate() {
        let x = Tensor::<f64>::randn(&[2, c, hw.0, hw.1], 1.0, seed as u64).unwrap();
        let w = Tensor::<f64>::randn(&[o, c, k.0, k.1], 1.0, 200 + seed as u64).unwrap();
        let y_shape = conv2d(&x, &w, &geom).unwrap().shape().to_vec();
        let u = Tensor::<f64>::randn(&y_shape, 1.0, 300 + seed as u64).unwrap();

        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let loss = xv
            .conv2d(&tape.constant(w.clone()), geom)
            .unwrap()
            .mul(&tape.constant(u.clone()))
            .unwrap()
            .sum()
            .unwrap();
        let grad = tape.grad(&loss, &[&xv], false).unwrap().remove(0);
        let forward = conv2d_input_grad(&u, &w, &geom, hw).unwrap();
        assert!(max_diff(grad.value(), &forward) <= 1e-10, "config {seed}");
    }
}

#[test]
fn adjoint_identities_hold() {
    // <conv(x, w), u> == <x, A^T u> == <w, W(x, u)>
    for (seed, (c, o, hw, k, geom)) in random_configs().into_iter().enumerate() {
        let x = Tensor::<f64>::randn(&[2, c, hw.0, hw.1], 1.0, seed as u64).unwrap();
        let w = Tensor::<f64>::randn(&[o, c, k.0, k.1], 1.0, 10 + seed as u64).unwrap();
        let y = conv2d(&x, &w, &geom).unwrap();
        let u = Tensor::<f64>::randn(y.shape(), 1.0, 20 + seed as u64).unwrap();
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&y, &u);
        let via_input = dot(&x, &conv2d_input_grad(&u, &w, &geom, hw).unwrap());
        let via_weight = dot(&w, &conv2d_weight_grad(&x, &u, &geom, k).unwrap());
        assert!((lhs - via_input).abs() <= 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - via_weight).abs() <= 1e-9 * lhs.abs().max(1.0));
    }
}
