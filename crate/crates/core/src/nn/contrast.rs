//! Forward and backward kernels for the temporal and instance contrastive
//! losses over two augmented views `r`, `r2` of shape `[batch × time × dim]`.
//!
//! Both losses share one structure. Within a *group* (one instance for the
//! temporal loss, one timestep for the instance loss) every *member* `m`
//! scores its positive `r[m]·r2[m]` against `r[m]·r2[m']` for all members and
//! `r[m]·r[m']` for `m' ≠ m`. The per-term loss is the negative log of the
//! positive's softmax share; the result is the mean over all terms.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContrastKind {
    /// Negatives are other timesteps of the same instance.
    Temporal,
    /// Negatives are other instances at the same timestep.
    Instance,
}

struct Layout {
    batch: usize,
    time: usize,
    dim: usize,
}

impl Layout {
    fn groups(&self, kind: ContrastKind) -> (usize, usize) {
        match kind {
            ContrastKind::Temporal => (self.batch, self.time),
            ContrastKind::Instance => (self.time, self.batch),
        }
    }

    fn offset(&self, kind: ContrastKind, group: usize, member: usize) -> usize {
        let (i, t) = match kind {
            ContrastKind::Temporal => (group, member),
            ContrastKind::Instance => (member, group),
        };
        (i * self.time + t) * self.dim
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns the mean loss and, when `upstream` is given, the gradients with
/// respect to `r` and `r2` scaled by it.
pub(crate) fn contrast(
    kind: ContrastKind,
    r: &[f64],
    r2: &[f64],
    batch: usize,
    time: usize,
    dim: usize,
    upstream: Option<f64>,
) -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
    let layout = Layout { batch, time, dim };
    let (n_groups, n_members) = layout.groups(kind);
    let terms = (n_groups * n_members) as f64;
    if terms == 0.0 {
        return (0.0, upstream.map(|_| (vec![0.0; r.len()], vec![0.0; r2.len()])));
    }
    let mut grads = upstream.map(|_| (vec![0.0; r.len()], vec![0.0; r2.len()]));
    let scale = upstream.unwrap_or(0.0) / terms;

    let mut total = 0.0;
    // cross[m'] = r[m]·r2[m'], own[m'] = r[m]·r[m'] (own[m] unused)
    let mut cross = vec![0.0; n_members];
    let mut own = vec![0.0; n_members];
    for g in 0..n_groups {
        for m in 0..n_members {
            let om = layout.offset(kind, g, m);
            let anchor = &r[om..om + dim];
            let mut max = f64::NEG_INFINITY;
            for m2 in 0..n_members {
                let o2 = layout.offset(kind, g, m2);
                cross[m2] = dot(anchor, &r2[o2..o2 + dim]);
                max = max.max(cross[m2]);
                if m2 != m {
                    own[m2] = dot(anchor, &r[o2..o2 + dim]);
                    max = max.max(own[m2]);
                }
            }
            let mut denom = 0.0;
            for m2 in 0..n_members {
                denom += (cross[m2] - max).exp();
                if m2 != m {
                    denom += (own[m2] - max).exp();
                }
            }
            let lse = max + denom.ln();
            total += lse - cross[m];

            if let Some((gr, gr2)) = grads.as_mut() {
                for m2 in 0..n_members {
                    let o2 = layout.offset(kind, g, m2);
                    let mut c_cross = (cross[m2] - lse).exp();
                    if m2 == m {
                        c_cross -= 1.0;
                    }
                    let c_cross = c_cross * scale;
                    for d in 0..dim {
                        gr[om + d] += c_cross * r2[o2 + d];
                        gr2[o2 + d] += c_cross * r[om + d];
                    }
                    if m2 != m {
                        let c_own = (own[m2] - lse).exp() * scale;
                        for d in 0..dim {
                            gr[om + d] += c_own * r[o2 + d];
                            gr[o2 + d] += c_own * r[om + d];
                        }
                    }
                }
            }
        }
    }
    (total / terms, grads)
}
