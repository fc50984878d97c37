//! Scan throughput smoke benchmark: sequential vs chunked parallel.

use std::time::Instant;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use rotrnn::scan::{parallel_scan, sequential_scan, ScanElement};

#[derive(Debug, Clone)]
pub struct ScanBenchReport {
    pub t_len: usize,
    pub d_h: usize,
    pub chunk: usize,
    pub threads: usize,
    pub sequential_elems_per_sec: f64,
    pub parallel_elems_per_sec: f64,
}

impl ScanBenchReport {
    pub fn speedup(&self) -> f64 {
        self.parallel_elems_per_sec / self.sequential_elems_per_sec
    }
}

/// Time both strategies on one random element sequence, best of `reps`.
pub fn bench_scan(t_len: usize, d_h: usize, chunk: Option<usize>, reps: usize) -> Result<ScanBenchReport> {
    if t_len == 0 || d_h == 0 || d_h % 2 != 0 || reps == 0 {
        return Err(config_err("bench needs t >= 1, even d_h >= 2, reps >= 1"));
    }
    let threads = rayon::current_num_threads();
    // chunks sized so every worker gets several, amortizing the second pass
    let chunk = chunk.unwrap_or_else(|| (t_len / (4 * threads)).max(1));

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let elems: Vec<ScanElement> = (0..t_len)
        .map(|_| {
            ScanElement::new(
                rng.gen_range(0.5..1.0),
                Array1::from_shape_simple_fn(d_h / 2, || rng.gen_range(-0.1..0.1)),
                Array1::from_shape_simple_fn(d_h, || rng.gen_range(-1.0..1.0)),
            )
            .expect("valid element")
        })
        .collect();

    // warm up both paths before timing
    let _ = sequential_scan(&elems)?;
    let _ = parallel_scan(&elems, chunk)?;

    let mut best_seq = f64::INFINITY;
    let mut best_par = f64::INFINITY;
    for _ in 0..reps {
        let t0 = Instant::now();
        let out = sequential_scan(&elems)?;
        best_seq = best_seq.min(t0.elapsed().as_secs_f64());
        std::hint::black_box(&out);

        let t0 = Instant::now();
        let out = parallel_scan(&elems, chunk)?;
        best_par = best_par.min(t0.elapsed().as_secs_f64());
        std::hint::black_box(&out);
    }

    Ok(ScanBenchReport {
        t_len,
        d_h,
        chunk,
        threads,
        sequential_elems_per_sec: t_len as f64 / best_seq,
        parallel_elems_per_sec: t_len as f64 / best_par,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_runs_and_reports() {
        let report = bench_scan(2048, 8, None, 2).unwrap();
        assert!(report.sequential_elems_per_sec > 0.0);
        assert!(report.parallel_elems_per_sec > 0.0);
        assert!(report.threads >= 1);
    }
}
