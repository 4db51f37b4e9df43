//! Patch feature extractors.

use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, BatchNorm2d, BatchNormCache, Conv2d,
    ConvCache, Grads, MaxPool2d, MaxPoolCache, ParamGroup, ParamSet, Scalar,
};

/// Backbone architecture selection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackboneKind {
    /// 34-layer residual network; weights are expected to come from an
    /// ImageNet-pretrained safetensors export.
    Resnet34Pretrained,
    /// Three conv blocks followed by global average pooling.
    SmallCnn { widths: [usize; 3] },
}

impl BackboneKind {
    pub fn small_cnn() -> Self {
        BackboneKind::SmallCnn { widths: [32, 64, 128] }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            BackboneKind::Resnet34Pretrained => 512,
            BackboneKind::SmallCnn { widths } => widths[2],
        }
    }

    /// Whether inputs are normalized with ImageNet channel statistics.
    pub fn uses_imagenet_normalization(&self) -> bool {
        matches!(self, BackboneKind::Resnet34Pretrained)
    }
}

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

const PREFIX: &str = "backbone";

#[derive(Clone, Debug)]
pub enum Backbone {
    SmallCnn(SmallCnn),
    ResNet34(ResNet34),
}

pub enum BackboneCache<T> {
    SmallCnn(SmallCnnCache<T>),
    ResNet34(ResNetCache<T>),
}

impl Backbone {
    pub fn build<T: Scalar, R: Rng>(kind: &BackboneKind, params: &mut ParamSet<T>, rng: &mut R) -> Self {
        match kind {
            BackboneKind::SmallCnn { widths } => Backbone::SmallCnn(SmallCnn::new(params, rng, *widths)),
            BackboneKind::Resnet34Pretrained => Backbone::ResNet34(ResNet34::new(params, rng)),
        }
    }

    /// `[3, N, d, d]` → `[N, output_dim]`.
    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Array4<T>) -> Array2<T> {
        match self {
            Backbone::SmallCnn(b) => b.forward(params, x),
            Backbone::ResNet34(b) => b.forward(params, x),
        }
    }

    pub fn forward_train<T: Scalar>(&self, params: &ParamSet<T>, x: &Array4<T>) -> (Array2<T>, BackboneCache<T>) {
        match self {
            Backbone::SmallCnn(b) => {
                let (y, c) = b.forward_train(params, x);
                (y, BackboneCache::SmallCnn(c))
            }
            Backbone::ResNet34(b) => {
                let (y, c) = b.forward_train(params, x);
                (y, BackboneCache::ResNet34(c))
            }
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &BackboneCache<T>,
        dy: &Array2<T>,
        grads: &mut Grads<T>,
    ) {
        match (self, cache) {
            (Backbone::SmallCnn(b), BackboneCache::SmallCnn(c)) => b.backward(params, c, dy, grads),
            (Backbone::ResNet34(b), BackboneCache::ResNet34(c)) => b.backward(params, c, dy, grads),
            _ => unreachable!("backbone cache does not match backbone"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SmallCnn {
    convs: [Conv2d; 3],
    pool: MaxPool2d,
}

pub struct SmallCnnCache<T> {
    convs: Vec<ConvCache<T>>,
    activations: Vec<Array4<T>>,
    pools: Vec<MaxPoolCache>,
    final_dim: (usize, usize, usize, usize),
}

impl SmallCnn {
    pub fn new<T: Scalar, R: Rng>(params: &mut ParamSet<T>, rng: &mut R, widths: [usize; 3]) -> Self {
        let mut cin = 3;
        let convs = [0, 1, 2].map(|i| {
            let conv = Conv2d::new(
                params,
                rng,
                &format!("{PREFIX}.conv{}", i + 1),
                ParamGroup::Backbone,
                cin,
                widths[i],
                3,
                1,
                1,
                true,
            );
            cin = widths[i];
            conv
        });
        Self {
            convs,
            pool: MaxPool2d {
                kernel: 2,
                stride: 2,
                padding: 0,
            },
        }
    }

    fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Array4<T>) -> Array2<T> {
        let mut h = relu(self.convs[0].forward(params, x));
        h = self.pool.forward(&h);
        h = relu(self.convs[1].forward(params, &h));
        h = self.pool.forward(&h);
        h = relu(self.convs[2].forward(params, &h));
        global_avg_pool(&h)
    }

    fn forward_train<T: Scalar>(&self, params: &ParamSet<T>, x: &Array4<T>) -> (Array2<T>, SmallCnnCache<T>) {
        let mut convs = Vec::with_capacity(3);
        let mut activations = Vec::with_capacity(3);
        let mut pools = Vec::with_capacity(2);
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let (y, c) = conv.forward_train(params, &h);
            convs.push(c);
            let y = relu(y);
            if i < 2 {
                let (p, pc) = self.pool.forward_train(&y);
                activations.push(y);
                pools.push(pc);
                h = p;
            } else {
                activations.push(y.clone());
                h = y;
            }
        }
        let final_dim = h.dim();
        (
            global_avg_pool(&h),
            SmallCnnCache {
                convs,
                activations,
                pools,
                final_dim,
            },
        )
    }

    fn backward<T: Scalar>(&self, params: &ParamSet<T>, cache: &SmallCnnCache<T>, dy: &Array2<T>, grads: &mut Grads<T>) {
        let mut d = global_avg_pool_backward(dy, cache.final_dim);
        for i in (0..3).rev() {
            if i < 2 {
                d = self.pool.backward(&cache.pools[i], &d);
            }
            d = relu_backward(&cache.activations[i], d);
            match self.convs[i].backward(params, &cache.convs[i], &d, grads, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

struct BasicBlockCache<T> {
    conv1: ConvCache<T>,
    bn1: BatchNormCache<T>,
    mid: Array4<T>,
    conv2: ConvCache<T>,
    bn2: BatchNormCache<T>,
    downsample: Option<(ConvCache<T>, BatchNormCache<T>)>,
    out: Array4<T>,
}

impl BasicBlock {
    fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let g = ParamGroup::Backbone;
        let conv1 = Conv2d::new(params, rng, &format!("{name}.conv1"), g, cin, cout, 3, stride, 1, false);
        let bn1 = BatchNorm2d::new(params, &format!("{name}.bn1"), g, cout);
        let conv2 = Conv2d::new(params, rng, &format!("{name}.conv2"), g, cout, cout, 3, 1, 1, false);
        let bn2 = BatchNorm2d::new(params, &format!("{name}.bn2"), g, cout);
        let downsample = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(params, rng, &format!("{name}.downsample.0"), g, cin, cout, 1, stride, 0, false),
                BatchNorm2d::new(params, &format!("{name}.downsample.1"), g, cout),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        }
    }

    fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Array4<T>) -> Array4<T> {
        let h = relu(self.bn1.forward(params, &self.conv1.forward(params, x)));
        let mut h = self.bn2.forward(params, &self.conv2.forward(params, &h));
        match &self.downsample {
            Some((conv, bn)) => h += &bn.forward(params, &conv.forward(params, x)),
            None => h += x,
        }
        relu(h)
    }

    fn forward_train<T: Scalar>(&self, params: &ParamSet<T>, x: &Array4<T>) -> (Array4<T>, BasicBlockCache<T>) {
        let (h, conv1) = self.conv1.forward_train(params, x);
        let (h, bn1) = self.bn1.forward_train(params, &h);
        let mid = relu(h);
        let (h, conv2) = self.conv2.forward_train(params, &mid);
        let (mut h, bn2) = self.bn2.forward_train(params, &h);
        let downsample = match &self.downsample {
            Some((conv, bn)) => {
                let (s, cc) = conv.forward_train(params, x);
                let (s, bc) = bn.forward_train(params, &s);
                h += &s;
                Some((cc, bc))
            }
            None => {
                h += x;
                None
            }
        };
        let out = relu(h);
        (
            out.clone(),
            BasicBlockCache {
                conv1,
                bn1,
                mid,
                conv2,
                bn2,
                downsample,
                out,
            },
        )
    }

    fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &BasicBlockCache<T>,
        dy: Array4<T>,
        grads: &mut Grads<T>,
    ) -> Array4<T> {
        let dsum = relu_backward(&cache.out, dy);
        let d = self.bn2.backward(&cache.bn2, &dsum, grads);
        let d = self.conv2.backward(params, &cache.conv2, &d, grads, true).expect("input grad requested");
        let d = relu_backward(&cache.mid, d);
        let d = self.bn1.backward(&cache.bn1, &d, grads);
        let mut dx = self.conv1.backward(params, &cache.conv1, &d, grads, true).expect("input grad requested");
        match (&self.downsample, &cache.downsample) {
            (Some((conv, bn)), Some((cc, bc))) => {
                let ds = bn.backward(bc, &dsum, grads);
                dx += &conv.backward(params, cc, &ds, grads, true).expect("input grad requested");
            }
            _ => dx += &dsum,
        }
        dx
    }
}

/// ResNet-34 trunk without the ImageNet classifier. Parameter names follow
/// the torchvision layout under a `backbone.` prefix, so exported
/// torchvision weights can be loaded directly.
#[derive(Clone, Debug)]
pub struct ResNet34 {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    pool: MaxPool2d,
    blocks: Vec<BasicBlock>,
}

pub struct ResNetCache<T> {
    conv1: ConvCache<T>,
    bn1: BatchNormCache<T>,
    stem: Array4<T>,
    pool: MaxPoolCache,
    blocks: Vec<BasicBlockCache<T>>,
    final_dim: (usize, usize, usize, usize),
}

impl ResNet34 {
    const STAGES: [(usize, usize); 4] = [(64, 3), (128, 4), (256, 6), (512, 3)];

    pub fn new<T: Scalar, R: Rng>(params: &mut ParamSet<T>, rng: &mut R) -> Self {
        let g = ParamGroup::Backbone;
        let conv1 = Conv2d::new(params, rng, &format!("{PREFIX}.conv1"), g, 3, 64, 7, 2, 3, false);
        let bn1 = BatchNorm2d::new(params, &format!("{PREFIX}.bn1"), g, 64);
        let mut blocks = Vec::new();
        let mut cin = 64;
        for (stage, &(cout, depth)) in Self::STAGES.iter().enumerate() {
            for j in 0..depth {
                let stride = if stage > 0 && j == 0 { 2 } else { 1 };
                let name = format!("{PREFIX}.layer{}.{j}", stage + 1);
                blocks.push(BasicBlock::new(params, rng, &name, cin, cout, stride));
                cin = cout;
            }
        }
        Self {
            conv1,
            bn1,
            pool: MaxPool2d {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            blocks,
        }
    }

    fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Array4<T>) -> Array2<T> {
        let h = relu(self.bn1.forward(params, &self.conv1.forward(params, x)));
        let mut h = self.pool.forward(&h);
        for b in &self.blocks {
            h = b.forward(params, &h);
        }
        global_avg_pool(&h)
    }

    fn forward_train<T: Scalar>(&self, params: &ParamSet<T>, x: &Array4<T>) -> (Array2<T>, ResNetCache<T>) {
        let (h, conv1) = self.conv1.forward_train(params, x);
        let (h, bn1) = self.bn1.forward_train(params, &h);
        let stem = relu(h);
        let (mut h, pool) = self.pool.forward_train(&stem);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward_train(params, &h);
            blocks.push(c);
            h = y;
        }
        let final_dim = h.dim();
        (
            global_avg_pool(&h),
            ResNetCache {
                conv1,
                bn1,
                stem,
                pool,
                blocks,
                final_dim,
            },
        )
    }

    fn backward<T: Scalar>(&self, params: &ParamSet<T>, cache: &ResNetCache<T>, dy: &Array2<T>, grads: &mut Grads<T>) {
        let mut d = global_avg_pool_backward(dy, cache.final_dim);
        for (b, c) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            d = b.backward(params, c, d, grads);
        }
        let d = self.pool.backward(&cache.pool, &d);
        let d = relu_backward(&cache.stem, d);
        let d = self.bn1.backward(&cache.bn1, &d, grads);
        self.conv1.backward(params, &cache.conv1, &d, grads, false);
    }
}
