//! Relative kernel microbenchmarks. Every kernel is checked against the
//! reference result before it is timed.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::kernels::{build_lut, gemm_int8, gemv_w1a8_lut, gemv_w1a8_ref};
use crate::quant::{absmax_quantize, binarize};
use crate::tensor::{matmul_nt, FloatMatrix};

pub const KERNELS: [&str; 4] = ["gemv_w1a8_ref", "gemv_w1a8_lut", "gemm_int8", "matmul_f32"];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kernel: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub median_ns: u64,
    pub reps: usize,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("kernel,rows,cols,median_ns,reps\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.kernel, r.rows, r.cols, r.median_ns, r.reps).unwrap();
    }
    s
}

fn median_ns(reps: usize, mut f: impl FnMut()) -> u64 {
    let mut t: Vec<u64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_nanos() as u64
        })
        .collect();
    t.sort_unstable();
    t[t.len() / 2]
}

/// Times one activation row against a `rows × cols` weight for each kernel.
/// Returns `|sizes| × |KERNELS|` rows.
pub fn bench_kernels(sizes: &[(usize, usize)], reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if reps == 0 || sizes.iter().any(|&(r, c)| r == 0 || c == 0) {
        return Err(invalid("benchmark sizes and repetitions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(sizes.len() * KERNELS.len());
    for &(rows, cols) in sizes {
        let wf = FloatMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
        let xf = FloatMatrix::from_fn(1, cols, |_, _| rng.gen_range(-4.0..4.0));
        let wb = binarize(&wf)?;
        let w8 = absmax_quantize(&wf);
        let x8 = absmax_quantize(&xf);
        let a = x8.row(0);

        let reference = gemv_w1a8_ref(&wb, a)?;
        if gemv_w1a8_lut(&wb, &build_lut(a))? != reference {
            return Err(invalid(format!("lut gemv disagrees with the reference at {rows}x{cols}")));
        }
        let int8 = gemm_int8(&w8, &x8)?;
        let direct: Vec<i32> = (0..rows)
            .map(|i| w8.row(i).iter().zip(a).map(|(&w, &x)| w as i32 * x as i32).sum())
            .collect();
        if int8.row(0) != direct.as_slice() {
            return Err(invalid(format!("int8 gemm disagrees with the direct sum at {rows}x{cols}")));
        }

        let times = [
            median_ns(reps, || {
                black_box(gemv_w1a8_ref(&wb, black_box(a)).unwrap());
            }),
            median_ns(reps, || {
                black_box(gemv_w1a8_lut(&wb, &build_lut(black_box(a))).unwrap());
            }),
            median_ns(reps, || {
                black_box(gemm_int8(&w8, black_box(&x8)).unwrap());
            }),
            median_ns(reps, || {
                black_box(matmul_nt(black_box(&xf), &wf));
            }),
        ];
        for (kernel, median_ns) in KERNELS.into_iter().zip(times) {
            out.push(BenchRow { kernel, rows, cols, median_ns, reps });
        }
    }
    Ok(out)
}
