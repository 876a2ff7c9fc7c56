use lwdet::fusion::avg_pool_as_3x3;
use lwdet::init::{random_tensor, rng};
use lwdet::tensor::{concat_channels, conv2d, pool2d, softmax_channelwise, split_channels, Conv2dSpec, PoolMode, Tensor};
use proptest::prelude::*;

fn tensor(dims: [usize; 4], seed: u64) -> Tensor {
    random_tensor(dims, -1.0, 1.0, &mut rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn depthwise_unit_kernel_is_identity(c in 1usize..6, h in 1usize..9, w in 1usize..9, seed: u64) {
        let x = tensor([1, c, h, w], seed);
        let spec = Conv2dSpec::depthwise(c, 1, 1);
        let y = conv2d(&x, &spec, &Tensor::full([c, 1, 1, 1], 1.0), None).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn conv_is_linear(
        cin in 1usize..5, cout in 1usize..5, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3, h in 3usize..10, w in 3usize..10,
        a in -2.0f32..2.0, b in -2.0f32..2.0, seed: u64,
    ) {
        let spec = Conv2dSpec::new(cin, cout, k).with_stride(stride);
        let x = tensor([1, cin, h, w], seed);
        let y = tensor([1, cin, h, w], seed ^ 1);
        let wt = tensor(spec.weight_dims(), seed ^ 2);
        let mix = Tensor::from_fn(x.dims(), |n, c, i, j| a * x.at(n, c, i, j) + b * y.at(n, c, i, j));
        let lhs = conv2d(&mix, &spec, &wt, None).unwrap();
        let cx = conv2d(&x, &spec, &wt, None).unwrap();
        let cy = conv2d(&y, &spec, &wt, None).unwrap();
        let rhs = Tensor::from_fn(lhs.dims(), |n, c, i, j| a * cx.at(n, c, i, j) + b * cy.at(n, c, i, j));
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-4);
    }

    #[test]
    fn avg_pool_equals_diagonal_conv(c in 1usize..6, h in 1usize..10, w in 1usize..10, seed: u64) {
        let x = tensor([1, c, h, w], seed);
        let kernel = avg_pool_as_3x3(c, c, 1).unwrap();
        let conv = conv2d(&x, &Conv2dSpec::new(c, c, 3), &kernel, None).unwrap();
        prop_assert!(conv.max_abs_diff(&pool2d(&x, PoolMode::Avg, 3, 1, 1).unwrap()) < 1e-6);
    }

    #[test]
    fn split_and_concat_are_inverse(sizes in prop::collection::vec(1usize..4, 1..5), h in 1usize..5, w in 1usize..5, seed: u64) {
        let c: usize = sizes.iter().sum();
        let x = tensor([2, c, h, w], seed);
        let parts = split_channels(&x, &sizes).unwrap();
        prop_assert_eq!(&concat_channels(&parts.iter().collect::<Vec<_>>()).unwrap(), &x);
        let again = split_channels(&concat_channels(&parts.iter().collect::<Vec<_>>()).unwrap(), &sizes).unwrap();
        prop_assert_eq!(again, parts);
    }

    #[test]
    fn softmax_groups_sum_to_one(group in 1usize..8, groups in 1usize..4, h in 1usize..5, w in 1usize..5, seed: u64) {
        let x = random_tensor([1, group * groups, h, w], -20.0, 20.0, &mut rng(seed));
        let s = softmax_channelwise(&x, group).unwrap();
        for g in 0..groups {
            for i in 0..h {
                for j in 0..w {
                    let sum: f32 = (0..group).map(|k| s.at(0, g * group + k, i, j)).sum();
                    prop_assert!((sum - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}
