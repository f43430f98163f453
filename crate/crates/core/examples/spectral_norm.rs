//! Power iteration estimates the largest singular value of a weight matrix;
//! dividing by it bounds the layer's Lipschitz constant.

use idunet::checks::rand_tensor;
use idunet::spectral::{init_state, power_iteration, sigma_estimate};
use idunet::Shape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let w = rand_tensor(Shape::new(16, 24, 1, 1), 3).map(|v| 5.0 * v);
    let mut u = init_state::<f64>(16, &mut ChaCha8Rng::seed_from_u64(1));
    for it in [1, 2, 5, 20, 100] {
        let mut uu = u.clone();
        for _ in 0..it {
            power_iteration(&w, &mut uu);
        }
        println!("{it:>3} iterations: sigma ~ {:.6}", sigma_estimate(&w, &uu));
    }
    for _ in 0..100 {
        power_iteration(&w, &mut u);
    }
    let s = sigma_estimate(&w, &u);
    let normalized = w.map(|v| v / s);
    let mut v = init_state::<f64>(16, &mut ChaCha8Rng::seed_from_u64(2));
    for _ in 0..100 {
        power_iteration(&normalized, &mut v);
    }
    println!("after normalization: sigma ~ {:.6}", sigma_estimate(&normalized, &v));
}
