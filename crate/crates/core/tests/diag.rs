//! Temporary diagnostic: where does codec reconstruction error live?

use goalloop_core::checkpoint::ParamStore;
use goalloop_core::codec::{Codec, CodecConfig};
use goalloop_core::dataset::load_split;
use goalloop_core::Graph;

#[test]
#[ignore]
fn recon_error_breakdown() {
    let out = std::env::var("DIAG_OUT").unwrap_or_else(|_| "/tmp/tune/b_out".into());
    let (_, eps) = load_split(std::path::Path::new(&format!("{out}/data/val.bin"))).unwrap();
    let mut store = ParamStore::new();
    let codec = Codec::init(&mut store, 0, CodecConfig::default()).unwrap();
    let loaded = ParamStore::load(std::path::Path::new(&format!("{out}/ckpt/codec.bin"))).unwrap();
    loaded.load_into(&mut store).unwrap();

    let s = 32usize;
    let mut edge_err = 0.0f64;
    let mut flat_err = 0.0f64;
    let mut edge_n = 0usize;
    let mut flat_n = 0usize;
    let mut worst: Vec<(f64, usize, usize)> = Vec::new();
    for (ei, ep) in eps.iter().take(6).enumerate() {
        for t in (0..ep.n_frames(s)).step_by(40) {
            let frame = ep.frame_f32(t, s);
            let x = goalloop_core::Tensor::new(vec![1, 3, s, s], frame.clone()).unwrap();
            let mut g = Graph::new();
            let vars = store.attach_frozen(&mut g);
            let xin = g.input(x);
            let (mean, _) = codec.encode_spatial_dist(&mut g, &vars, xin).unwrap();
            let recon = codec.decode_spatial(&mut g, &vars, mean).unwrap();
            let r = g.value(recon).data().to_vec();
            // Edge mask: pixel whose 4-neighborhood in ANY channel varies > 0.05.
            let mut frame_err = 0.0f64;
            for y in 0..s {
                for xx in 0..s {
                    let mut is_edge = false;
                    for c in 0..3 {
                        let v = frame[c * s * s + y * s + xx];
                        for (dy, dx) in [(0i32, 1i32), (1, 0), (0, -1), (-1, 0)] {
                            let (ny, nx) = (y as i32 + dy, xx as i32 + dx);
                            if ny >= 0 && ny < s as i32 && nx >= 0 && nx < s as i32 {
                                let nv = frame[c * s * s + ny as usize * s + nx as usize];
                                if (v - nv).abs() > 0.05 {
                                    is_edge = true;
                                }
                            }
                        }
                    }
                    let mut px = 0.0f64;
                    for c in 0..3 {
                        let i = c * s * s + y * s + xx;
                        let d = (frame[i] - r[i]) as f64;
                        px += d * d;
                    }
                    px /= 3.0;
                    frame_err += px;
                    if is_edge {
                        edge_err += px;
                        edge_n += 1;
                    } else {
                        flat_err += px;
                        flat_n += 1;
                    }
                }
            }
            worst.push((frame_err / (s * s) as f64, ei, t));
        }
    }
    worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    println!("edge pixels: {edge_n} mse {:.5}", edge_err / edge_n as f64);
    println!("flat pixels: {flat_n} mse {:.6}", flat_err / flat_n as f64);
    println!(
        "total mse {:.5} -> psnr {:.2} dB",
        (edge_err + flat_err) / (edge_n + flat_n) as f64,
        -10.0 * ((edge_err + flat_err) / (edge_n + flat_n) as f64).log10()
    );
    println!("worst frames: {:?}", &worst[..4.min(worst.len())]);
}
