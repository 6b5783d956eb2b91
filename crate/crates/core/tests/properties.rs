use mdir::engine::kernels::{col2im, im2col, Window};
use mdir::{Graph, Mode, ParamStore, Tensor};
use proptest::prelude::*;

fn seq(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i * 37 % 101) as f64 - 50.0) / 25.0)
}

fn window(c: usize, h: usize, w: usize, k: usize) -> Window {
    Window {
        channels: c,
        height: h,
        width: w,
        k,
        stride: 1,
        pad: (k - 1) / 2,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn same_padded_conv_shape(k in prop::sample::select(vec![1usize, 3, 5, 7]), stride in 1usize..=2,
                              h in 1usize..=16, w in 1usize..=16, c_in in 1usize..=3, c_out in 1usize..=3) {
        let store = ParamStore::<f64>::new(0);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(seq(&[2, c_in, h, w]));
        let wt = g.input(seq(&[c_out, c_in, k, k]));
        let y = g.tape.conv2d(x, wt, None, stride, (k - 1) / 2).unwrap();
        // "same" padding: ceil(len / stride)
        prop_assert_eq!(g.tape.shape(y), &[2, c_out, h.div_ceil(stride), w.div_ceil(stride)]);
    }

    #[test]
    fn valid_conv_shape(k in prop::sample::select(vec![1usize, 3, 5, 7]), stride in 1usize..=2,
                        h in 1usize..=16, w in 1usize..=16) {
        prop_assume!(k <= h && k <= w);
        let store = ParamStore::<f64>::new(0);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(seq(&[1, 2, h, w]));
        let wt = g.input(seq(&[3, 2, k, k]));
        let y = g.tape.conv2d(x, wt, None, stride, 0).unwrap();
        let span = |len: usize| (0..len).step_by(stride).filter(|&s| s + k <= len).count();
        prop_assert_eq!(g.tape.shape(y), &[1, 3, span(h), span(w)]);
    }

    #[test]
    fn transposed_conv_inverts_stride(k in 1usize..=4, stride in 1usize..=2, h in 1usize..=16, w in 1usize..=16) {
        let store = ParamStore::<f64>::new(0);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(seq(&[1, 2, h, w]));
        let wt = g.input(seq(&[2, 3, k, k]));
        let y = g.tape.conv_transpose2d(x, wt, None, stride, 0).unwrap();
        prop_assert_eq!(g.tape.shape(y), &[1, 3, (h - 1) * stride + k, (w - 1) * stride + k]);
    }

    #[test]
    fn unfold_and_resize_shapes(k in prop::sample::select(vec![1usize, 3, 5, 7]), h in 1usize..=16, w in 1usize..=16,
                                oh in 1usize..=16, ow in 1usize..=16) {
        let store = ParamStore::<f64>::new(0);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(seq(&[2, 3, h, w]));
        let u = g.tape.unfold(x, k).unwrap();
        prop_assert_eq!(g.tape.shape(u), &[2, 3, k * k, h * w]);
        let r = g.tape.resize(x, oh, ow).unwrap();
        prop_assert_eq!(g.tape.shape(r), &[2, 3, oh, ow]);
    }

    #[test]
    fn unfold_columns_hold_zero_padded_neighborhoods(k in prop::sample::select(vec![1usize, 3, 5, 7]),
                                                     h in 1usize..=9, w in 1usize..=9) {
        let c = 2;
        let x = seq(&[c, h, w]);
        let g = window(c, h, w, k);
        let mut cols = vec![0.0; g.rows() * g.cols()];
        im2col(x.data(), g, &mut cols);
        let r = (k / 2) as isize;
        for ch in 0..c {
            for i in 0..k {
                for j in 0..k {
                    for y in 0..h {
                        for xx in 0..w {
                            let (sy, sx) = (y as isize + i as isize - r, xx as isize + j as isize - r);
                            let want = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                0.0
                            } else {
                                x.data()[(ch * h + sy as usize) * w + sx as usize]
                            };
                            let got = cols[((ch * k + i) * k + j) * h * w + y * w + xx];
                            prop_assert_eq!(got, want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn fold_of_unfold_normalized_by_count_is_identity(k in prop::sample::select(vec![1usize, 3, 5, 7]),
                                                      h in 1usize..=16, w in 1usize..=16, c in 1usize..=3) {
        let x = seq(&[c, h, w]);
        let g = window(c, h, w, k);
        let mut cols = vec![0.0; g.rows() * g.cols()];
        im2col(x.data(), g, &mut cols);
        let mut folded = vec![0.0; c * h * w];
        col2im(&cols, g, &mut folded);
        let mut count = vec![0.0; c * h * w];
        col2im(&vec![1.0; cols.len()], g, &mut count);
        for ((f, n), v) in folded.iter().zip(&count).zip(x.data()) {
            prop_assert!(*n >= 1.0);
            prop_assert!((f / n - v).abs() < 1e-6);
        }
    }

    #[test]
    fn fold_is_the_adjoint_of_unfold(k in prop::sample::select(vec![3usize, 5]), h in 1usize..=8, w in 1usize..=8) {
        // <unfold(x), y> == <x, fold(y)>
        let g = window(2, h, w, k);
        let x = seq(&[2, h, w]);
        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        let mut ux = vec![0.0; y.len()];
        im2col(x.data(), g, &mut ux);
        let mut fy = vec![0.0; x.len()];
        col2im(&y, g, &mut fy);
        let lhs: f64 = ux.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(&fy).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }
}
