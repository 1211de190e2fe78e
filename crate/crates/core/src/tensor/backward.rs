use super::kernels::gemm;
use super::{Graph, GradientTable, Node, Op, Result, Tensor, TensorError};

/// Takes the gradient buffer for `id`, creating zeros on first touch.
fn take(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Vec<f64> {
    grads[id]
        .take()
        .unwrap_or_else(|| vec![0.0; nodes[id].value.len()])
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let mut buf = take(grads, nodes, id);
    f(&mut buf);
    grads[id] = Some(buf);
}

impl Graph {
    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backprop(&self, loss: Tensor<'_>) -> Result<GradientTable> {
        if !self.record {
            return Err(TensorError::NotRecorded);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.shape.clone()));
        }
        let mut table = GradientTable::default();
        if !root.needs_grad {
            return Ok(table);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        table.accumulate(*p, &node.shape, &g);
                    }
                }
                &Op::MatMul { a, b, rows, k, n } => {
                    let bv = &nodes[b].value;
                    let av = &nodes[a].value;
                    add_into(&mut grads, &nodes, a, |ga| {
                        gemm(rows, n, k, 1.0, &g, false, bv, true, 1.0, ga)
                    });
                    add_into(&mut grads, &nodes, b, |gb| {
                        gemm(k, rows, n, 1.0, av, true, &g, false, 1.0, gb)
                    });
                }
                &Op::BatchMatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    trans_b,
                    alpha,
                } => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    add_into(&mut grads, &nodes, a, |ga| {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &bv[i * k * n..(i + 1) * k * n];
                            // dA = G * op(B)^T
                            gemm(m, n, k, alpha, gi, false, bi, !trans_b, 1.0, &mut ga[i * m * k..(i + 1) * m * k]);
                        }
                    });
                    add_into(&mut grads, &nodes, b, |gb| {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &av[i * m * k..(i + 1) * m * k];
                            let out = &mut gb[i * k * n..(i + 1) * k * n];
                            if trans_b {
                                // B stored [n, k]: dB = G^T * A
                                gemm(n, m, k, alpha, gi, true, ai, false, 1.0, out);
                            } else {
                                gemm(k, m, n, alpha, ai, true, gi, false, 1.0, out);
                            }
                        }
                    });
                }
                &Op::Add { a, b } => {
                    add_into(&mut grads, &nodes, a, |ga| {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y)
                    });
                    add_into(&mut grads, &nodes, b, |gb| {
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x += y)
                    });
                }
                &Op::AddRow { x, bias } => {
                    add_into(&mut grads, &nodes, x, |gx| {
                        gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b)
                    });
                    add_into(&mut grads, &nodes, bias, |gb| {
                        let n = gb.len();
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    });
                }
                &Op::Mul { a, b } => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    add_into(&mut grads, &nodes, a, |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    });
                    add_into(&mut grads, &nodes, b, |gb| {
                        for i in 0..gb.len() {
                            gb[i] += g[i] * av[i];
                        }
                    });
                }
                &Op::Scale { x, factor } => {
                    add_into(&mut grads, &nodes, x, |gx| {
                        gx.iter_mut().zip(&g).for_each(|(a, b)| *a += factor * b)
                    });
                }
                &Op::Relu { x } => {
                    let xv = &nodes[x].value;
                    add_into(&mut grads, &nodes, x, |gx| {
                        for i in 0..gx.len() {
                            if xv[i] > 0.0 {
                                gx[i] += g[i];
                            }
                        }
                    });
                }
                &Op::Softmax { x } => {
                    let y = &node.value;
                    let d = *node.shape.last().unwrap();
                    add_into(&mut grads, &nodes, x, |gx| {
                        for ((yr, gr), out) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                out[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                    floored,
                } => {
                    let d = *node.shape.last().unwrap();
                    let gv = &nodes[*gain].value;
                    add_into(&mut grads, &nodes, *gain, |gg| {
                        for (hr, gr) in xhat.chunks(d).zip(g.chunks(d)) {
                            for j in 0..d {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    });
                    add_into(&mut grads, &nodes, *bias, |gb| {
                        for gr in g.chunks(d) {
                            gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                        }
                    });
                    add_into(&mut grads, &nodes, *x, |gx| {
                        let inv_d = 1.0 / d as f64;
                        let mut dh = vec![0.0; d];
                        for r in 0..inv_std.len() {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            for j in 0..d {
                                dh[j] = gr[j] * gv[j];
                            }
                            let mean_dh = dh.iter().sum::<f64>() * inv_d;
                            let mean_dh_h = if floored[r] {
                                0.0
                            } else {
                                dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() * inv_d
                            };
                            let out = &mut gx[r * d..(r + 1) * d];
                            for j in 0..d {
                                out[j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let d = *node.shape.last().unwrap();
                    add_into(&mut grads, &nodes, *table, |gt| {
                        for (row, &i) in g.chunks(d).zip(ids) {
                            gt[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(row)
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                }
                Op::Dropout { x, keep } => {
                    add_into(&mut grads, &nodes, *x, |gx| {
                        for i in 0..gx.len() {
                            gx[i] += g[i] * keep[i];
                        }
                    });
                }
                &Op::Reshape { x } => {
                    add_into(&mut grads, &nodes, x, |gx| {
                        gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b)
                    });
                }
                &Op::SplitHeads {
                    x,
                    batch,
                    len,
                    heads,
                } => {
                    let dh = *node.shape.last().unwrap();
                    let d = dh * heads;
                    add_into(&mut grads, &nodes, x, |gx| {
                        for b in 0..batch {
                            for t in 0..len {
                                let dst = (b * len + t) * d;
                                for h in 0..heads {
                                    let src = ((b * heads + h) * len + t) * dh;
                                    for j in 0..dh {
                                        gx[dst + h * dh + j] += g[src + j];
                                    }
                                }
                            }
                        }
                    });
                }
                &Op::MergeHeads {
                    x,
                    batch,
                    len,
                    heads,
                } => {
                    let d = *node.shape.last().unwrap();
                    let dh = d / heads;
                    add_into(&mut grads, &nodes, x, |gx| {
                        for b in 0..batch {
                            for t in 0..len {
                                let src = (b * len + t) * d;
                                for h in 0..heads {
                                    let dst = ((b * heads + h) * len + t) * dh;
                                    for j in 0..dh {
                                        gx[dst + j] += g[src + h * dh + j];
                                    }
                                }
                            }
                        }
                    });
                }
                Op::GatherRows { x, rows } => {
                    let d = *node.shape.last().unwrap();
                    add_into(&mut grads, &nodes, *x, |gx| {
                        for (row, &r) in g.chunks(d).zip(rows) {
                            gx[r * d..(r + 1) * d]
                                .iter_mut()
                                .zip(row)
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                }
                &Op::Log { x, floor } => {
                    let xv = &nodes[x].value;
                    add_into(&mut grads, &nodes, x, |gx| {
                        for i in 0..gx.len() {
                            if xv[i] > floor {
                                gx[i] += g[i] / xv[i];
                            }
                        }
                    });
                }
                &Op::Sum { x } => {
                    add_into(&mut grads, &nodes, x, |gx| gx.iter_mut().for_each(|a| *a += g[0]));
                }
                Op::WeightedSum { x, weights } => {
                    add_into(&mut grads, &nodes, *x, |gx| {
                        gx.iter_mut()
                            .zip(weights)
                            .for_each(|(a, w)| *a += g[0] * w)
                    });
                }
            }
        }
        Ok(table)
    }
}
