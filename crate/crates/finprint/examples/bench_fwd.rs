// scratch benchmark, not part of the repo
use finprint::model::{self, EncoderConfig};
use finprint::rng::RngState;
use ndarray::{Array2, Array4};
use rand::Rng;
use std::time::Instant;

fn main() {
    use finprint::model::bench::*;
    let mut rng = RngState::new(2).stream("b").rng();
    let mut batch = Array4::zeros((128, 64, 64, 1));
    for v in batch.iter_mut() { *v = rng.random::<f64>(); }

    let cfg = EncoderConfig::default();
    let w = model::init(&cfg, &RngState::new(1)).unwrap();

    // stage-by-stage forward
    for _ in 0..2 {
        let t = Instant::now();
        let c1 = conv_c1(batch.view(), &w.tensors.conv_w[0], &w.tensors.conv_b[0]);
        println!("conv1 stencil: {:?}", t.elapsed());
        let t = Instant::now();
        let (p1, _i1) = pool(&c1);
        println!("pool1: {:?}", t.elapsed());
        let t = Instant::now();
        let (c2, _cols2) = conv(p1.view(), &w.tensors.conv_w[1], &w.tensors.conv_b[1]);
        println!("conv2 (im2col+dgemm): {:?}", t.elapsed());
        let t = Instant::now();
        let (p2, _i2) = pool(&c2);
        println!("pool2: {:?}", t.elapsed());
        let t = Instant::now();
        let (c3, _cols3) = conv(p2.view(), &w.tensors.conv_w[2], &w.tensors.conv_b[2]);
        println!("conv3: {:?}", t.elapsed());
        let t = Instant::now();
        let (p3, _i3) = pool(&c3);
        println!("pool3: {:?} (sink {})", t.elapsed(), p3.sum());
        println!("--");
    }
}
