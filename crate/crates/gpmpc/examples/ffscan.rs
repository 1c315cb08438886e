//! Scan the feed-forward rotor thrust demanded by the reference.

use gpmpc::quad::QuadParams;
use gpmpc::sim::reference::LemniscateReference;

fn main() {
    let params = QuadParams::default();
    for duration in [16.0, 20.0, 24.0, 28.0] {
        let r = LemniscateReference::new(1.0, duration, 0.25, &params);
        let mut peak = 0.0f64;
        let mut at = 0.0;
        let n = 4000;
        for i in 0..n {
            let t = duration * i as f64 / n as f64;
            let (_, u) = r.sample(t);
            if u.thrusts[0] > peak {
                peak = u.thrusts[0];
                at = t;
            }
        }
        println!("T={duration:5.1}s  peak FF thrust/rotor {peak:.3} N (of 4.5) at t={at:.2}");
    }
}
