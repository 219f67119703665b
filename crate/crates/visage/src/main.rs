use ndarray::Array2;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a = Array2::<f32>::from_elem((m, k), 1.001);
    let b = Array2::<f32>::from_elem((k, n), 0.999);
    let mut c = Array2::<f32>::zeros((m, n));
    let t0 = Instant::now();
    for _ in 0..reps {
        ndarray::linalg::general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64();
    let gflops = 2.0 * (m * k * n * reps) as f64 / dt / 1e9;
    println!("f32 {}x{}x{} reps={}: {:.3}s  {:.2} GFLOP/s", m, k, n, reps, dt, gflops);
}

fn main() {
    bench(1024, 1024, 1024, 20);
    bench(256, 1152, 128, 200);   // conv-ish shape at 32x32 desk scale
    bench(64, 2048, 256, 400);
    bench(16, 4096, 2048, 100);   // fc-ish
}
