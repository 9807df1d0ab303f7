use crate::autodiff::Tape;
use crate::data::{normalize_case, Case};
use crate::error::{Error, Result};
use crate::model::{ContentPyramid, ModalityMask, Network};
use crate::tensor::Tensor;

/// Window starts along one axis: stride `patch / 2`, last window flush with the end.
pub fn window_starts(extent: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || extent < patch {
        return Err(Error::contract(format!("window {patch} does not fit extent {extent}")));
    }
    let stride = (patch / 2).max(1);
    let mut starts: Vec<usize> = (0..=extent - patch).step_by(stride).collect();
    if *starts.last().expect("non-empty") != extent - patch {
        starts.push(extent - patch);
    }
    Ok(starts)
}

fn window_origins(extents: [usize; 3], patch: usize) -> Result<Vec<[usize; 3]>> {
    let [zs, ys, xs] = [0, 1, 2].map(|a| window_starts(extents[a], patch));
    let (zs, ys, xs) = (zs?, ys?, xs?);
    let mut out = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push([z, y, x]);
            }
        }
    }
    Ok(out)
}

/// Sums window outputs into a full volume and divides by the overlap count.
struct Accumulator {
    channels: usize,
    extents: [usize; 3],
    sum: Vec<f32>,
    count: Vec<u32>,
}

impl Accumulator {
    fn new(channels: usize, extents: [usize; 3]) -> Self {
        let n = extents.iter().product::<usize>();
        Accumulator {
            channels,
            extents,
            sum: vec![0.0; channels * n],
            count: vec![0; n],
        }
    }

    fn add(&mut self, window: &Tensor<f32>, [oz, oy, ox]: [usize; 3], patch: usize) {
        let [_, h, w] = self.extents;
        let n = self.count.len();
        let p3 = patch.pow(3);
        for c in 0..self.channels {
            let src = &window.data()[c * p3..(c + 1) * p3];
            for z in 0..patch {
                for y in 0..patch {
                    let dst = c * n + ((oz + z) * h + oy + y) * w + ox;
                    let row = &src[(z * patch + y) * patch..][..patch];
                    for (d, s) in self.sum[dst..dst + patch].iter_mut().zip(row) {
                        *d += s;
                    }
                }
            }
        }
        for z in 0..patch {
            for y in 0..patch {
                let dst = ((oz + z) * h + oy + y) * w + ox;
                self.count[dst..dst + patch].iter_mut().for_each(|c| *c += 1);
            }
        }
    }

    fn mean(self) -> Vec<f32> {
        let n = self.count.len();
        let mut out = self.sum;
        for c in 0..self.channels {
            for (v, &k) in out[c * n..(c + 1) * n].iter_mut().zip(&self.count) {
                *v /= k as f32;
            }
        }
        out
    }
}

/// Class with the largest score per voxel; ties go to the lower class.
pub fn argmax_labels(scores: &[f32], classes: usize) -> Vec<u8> {
    let n = scores.len() / classes;
    (0..n)
        .map(|j| {
            let mut best = 0;
            for k in 1..classes {
                if scores[k * n + j] > scores[best * n + j] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

fn check_case(net: &Network<f32>, case: &Case) -> Result<()> {
    let c = net.config();
    if case.modalities() != c.modalities || case.classes() != c.classes {
        return Err(Error::config(format!(
            "case {} has {} modalities and {} classes, network expects {} and {}",
            case.id(),
            case.modalities(),
            case.classes(),
            c.modalities,
            c.classes
        )));
    }
    Ok(())
}

/// Label volumes for every subset in `subsets`, by sliding-window
/// inference with averaged logits. Content codes are computed once per
/// window and shared by all subsets. The case is normalized here.
pub fn predict_subsets(net: &Network<f32>, case: &Case, subsets: &[ModalityMask]) -> Result<Vec<Vec<u8>>> {
    check_case(net, case)?;
    let case = normalize_case(case)?;
    let c = net.config();
    let p = c.patch;
    let mut acc: Vec<Accumulator> = subsets.iter().map(|_| Accumulator::new(c.classes, case.extents())).collect();
    for origin in window_origins(case.extents(), p)? {
        let inputs = case.window(origin, p)?.network_inputs();
        let mut tape = Tape::new();
        let xs = net.input_vars(&mut tape, &inputs)?;
        let mut stages: Vec<Vec<Tensor<f32>>> = Vec::with_capacity(xs.len());
        for (i, &x) in xs.iter().enumerate() {
            if subsets.iter().any(|m| m.is_kept(i)) {
                let pyramid = net.encode_content(&mut tape, x, i)?;
                stages.push(pyramid.stages.iter().map(|&v| tape.value(v).clone()).collect());
            } else {
                stages.push(Vec::new());
            }
        }
        drop(tape);
        for (mask, acc) in subsets.iter().zip(&mut acc) {
            let mut tape = Tape::new();
            let pyramids: Vec<Option<ContentPyramid>> = (0..c.modalities)
                .map(|i| {
                    mask.is_kept(i).then(|| ContentPyramid {
                        stages: stages[i].iter().map(|t| tape.constant(t.clone())).collect(),
                    })
                })
                .collect();
            let fused = net.fuse_pyramid(&mut tape, &pyramids, mask)?;
            let zs: Vec<_> = fused.iter().map(|f| f.z).collect();
            let logits = net.decode_segmentation(&mut tape, &zs)?;
            acc.add(tape.value(logits), origin, p);
        }
    }
    Ok(acc.into_iter().map(|a| argmax_labels(&a.mean(), c.classes)).collect())
}

/// All modalities reconstructed from the kept subset, by sliding-window
/// inference with averaged outputs. Volumes are in normalized units.
pub fn reconstruct(net: &Network<f32>, case: &Case, mask: &ModalityMask) -> Result<Vec<Tensor<f32>>> {
    check_case(net, case)?;
    if !net.config().disentangle {
        return Err(Error::config("network was trained without reconstruction decoders"));
    }
    let case = normalize_case(case)?;
    let c = net.config();
    let p = c.patch;
    let mut acc: Vec<Accumulator> = (0..c.modalities).map(|_| Accumulator::new(1, case.extents())).collect();
    for origin in window_origins(case.extents(), p)? {
        let inputs = case.window(origin, p)?.network_inputs();
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &inputs, mask, None)?;
        for (r, acc) in out.reconstructions.iter().zip(&mut acc) {
            acc.add(tape.value(*r), origin, p);
        }
    }
    acc.into_iter()
        .map(|a| Tensor::new(case.extents(), a.mean()))
        .collect()
}
