//! The three training losses and their analytic gradients.
//!
//! All kernels work on a dense local parameter table ([`Params`]) holding
//! only what is trainable in the current snapshot, so parameters of frozen
//! spaces cannot receive gradient. Losses are sums, returned in `f64`;
//! gradients are added into a caller-provided buffer of the same shape.

use num_traits::Float;

use super::score::TripleScorer;

/// Dense entity and relation rows, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub dim: usize,
    pub entities: Vec<T>,
    pub relations: Vec<T>,
}

impl<T: Float> Params<T> {
    pub fn zeros(dim: usize, n_entities: usize, n_relations: usize) -> Self {
        Self {
            dim,
            entities: vec![T::zero(); n_entities * dim],
            relations: vec![T::zero(); n_relations * dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dim: self.dim,
            entities: vec![T::zero(); self.entities.len()],
            relations: vec![T::zero(); self.relations.len()],
        }
    }

    pub fn fill_zero(&mut self) {
        self.entities.iter_mut().for_each(|x| *x = T::zero());
        self.relations.iter_mut().for_each(|x| *x = T::zero());
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len() / self.dim
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len() / self.dim
    }

    pub fn entity(&self, i: usize) -> &[T] {
        &self.entities[i * self.dim..(i + 1) * self.dim]
    }

    pub fn relation(&self, i: usize) -> &[T] {
        &self.relations[i * self.dim..(i + 1) * self.dim]
    }

    pub fn entity_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.entities[i * self.dim..(i + 1) * self.dim]
    }

    pub fn relation_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.relations[i * self.dim..(i + 1) * self.dim]
    }
}

/// A triple over local row indices of a [`Params`] table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LocalTriple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Margin ranking loss `sum max(0, f(pos) - f(neg) + margin)`.
pub fn kge_loss<T: Float, S: TripleScorer>(
    pairs: &[(LocalTriple, LocalTriple)],
    params: &Params<T>,
    margin: f64,
    scorer: &S,
    grad: &mut Params<T>,
) -> f64 {
    let dim = params.dim;
    let mut gh = vec![T::zero(); dim];
    let mut gr = vec![T::zero(); dim];
    let mut gt = vec![T::zero(); dim];
    let mut total = 0.0;
    for (pos, neg) in pairs {
        let fp = scorer.distance(
            params.entity(pos.head),
            params.relation(pos.relation),
            params.entity(pos.tail),
        );
        let fn_ = scorer.distance(
            params.entity(neg.head),
            params.relation(neg.relation),
            params.entity(neg.tail),
        );
        let term = fp - fn_ + margin;
        if term <= 0.0 {
            continue;
        }
        total += term;
        for (triple, sign) in [(pos, T::one()), (neg, -T::one())] {
            gh.iter_mut().for_each(|x| *x = T::zero());
            gr.iter_mut().for_each(|x| *x = T::zero());
            gt.iter_mut().for_each(|x| *x = T::zero());
            scorer.accumulate_grad(
                params.entity(triple.head),
                params.relation(triple.relation),
                params.entity(triple.tail),
                sign,
                &mut gh,
                &mut gr,
                &mut gt,
            );
            add_into(grad.entity_mut(triple.head), &gh);
            add_into(grad.relation_mut(triple.relation), &gr);
            add_into(grad.entity_mut(triple.tail), &gt);
        }
    }
    total
}

/// Relation alignment `sum ||r - anchor||_2^2` over anchored relation rows.
pub fn ra_loss<T: Float>(anchors: &[(usize, Vec<T>)], params: &Params<T>, grad: &mut Params<T>) -> f64 {
    let two = T::one() + T::one();
    let mut total = 0.0;
    for (row, anchor) in anchors {
        let current = params.relation(*row);
        let g = grad.relation_mut(*row);
        for k in 0..current.len() {
            let d = current[k] - anchor[k];
            let d64 = d.to_f64().unwrap_or(f64::NAN);
            total += d64 * d64;
            g[k] = g[k] + two * d;
        }
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Entity is the head: context is `t - r`.
    Head,
    /// Entity is the tail: context is `h + r`.
    Tail,
}

/// Incidence lists over the current training delta.
#[derive(Clone, Debug, Default)]
pub struct Neighborhoods {
    pub triples: Vec<LocalTriple>,
    pub entity_ctx: Vec<Vec<(usize, Role)>>,
    pub relation_ctx: Vec<Vec<usize>>,
}

impl Neighborhoods {
    pub fn new(triples: &[LocalTriple], n_entities: usize, n_relations: usize) -> Self {
        let mut entity_ctx = vec![Vec::new(); n_entities];
        let mut relation_ctx = vec![Vec::new(); n_relations];
        for (idx, t) in triples.iter().enumerate() {
            entity_ctx[t.head].push((idx, Role::Head));
            entity_ctx[t.tail].push((idx, Role::Tail));
            relation_ctx[t.relation].push(idx);
        }
        Self {
            triples: triples.to_vec(),
            entity_ctx,
            relation_ctx,
        }
    }
}

/// Mean over incident triples of `t - r` (entity as head) and `h + r`
/// (entity as tail). `None` without incident triples.
pub fn mae_reconstruct_entity<T: Float>(
    entity: usize,
    nb: &Neighborhoods,
    params: &Params<T>,
) -> Option<Vec<T>> {
    let ctx = nb.entity_ctx.get(entity)?;
    if ctx.is_empty() {
        return None;
    }
    let mut acc = vec![0.0f64; params.dim];
    for &(idx, role) in ctx {
        let t = nb.triples[idx];
        let r = params.relation(t.relation);
        let (e, sign) = match role {
            Role::Head => (params.entity(t.tail), -1.0),
            Role::Tail => (params.entity(t.head), 1.0),
        };
        for k in 0..params.dim {
            acc[k] += e[k].to_f64().unwrap_or(f64::NAN) + sign * r[k].to_f64().unwrap_or(f64::NAN);
        }
    }
    let m = ctx.len() as f64;
    Some(acc.into_iter().map(|x| T::from(x / m).expect("finite")).collect())
}

/// Mean over triples with this relation of `t - h`. `None` if unused.
pub fn mae_reconstruct_relation<T: Float>(
    relation: usize,
    nb: &Neighborhoods,
    params: &Params<T>,
) -> Option<Vec<T>> {
    let ctx = nb.relation_ctx.get(relation)?;
    if ctx.is_empty() {
        return None;
    }
    let mut acc = vec![0.0f64; params.dim];
    for &idx in ctx {
        let t = nb.triples[idx];
        let (h, tl) = (params.entity(t.head), params.entity(t.tail));
        for k in 0..params.dim {
            acc[k] += tl[k].to_f64().unwrap_or(f64::NAN) - h[k].to_f64().unwrap_or(f64::NAN);
        }
    }
    let m = ctx.len() as f64;
    Some(acc.into_iter().map(|x| T::from(x / m).expect("finite")).collect())
}

/// Reconstruction loss `sum_e ||e - e_bar||^2 + sum_r ||r - r_bar||^2` over
/// the given entity and relation rows, with gradient flowing into both the
/// embedding and the context it was reconstructed from.
pub fn mae_loss<T: Float>(
    entities: &[usize],
    relations: &[usize],
    nb: &Neighborhoods,
    params: &Params<T>,
    grad: &mut Params<T>,
) -> f64 {
    let dim = params.dim;
    let two = T::one() + T::one();
    let mut total = 0.0;
    let mut diff = vec![T::zero(); dim];
    for &e in entities {
        let Some(rec) = mae_reconstruct_entity(e, nb, params) else {
            continue;
        };
        let v = params.entity(e);
        for k in 0..dim {
            diff[k] = v[k] - rec[k];
            let d = diff[k].to_f64().unwrap_or(f64::NAN);
            total += d * d;
        }
        let ctx = &nb.entity_ctx[e];
        let share = two / T::from(ctx.len()).expect("count");
        let g = grad.entity_mut(e);
        for k in 0..dim {
            g[k] = g[k] + two * diff[k];
        }
        for &(idx, role) in ctx {
            let t = nb.triples[idx];
            match role {
                Role::Head => {
                    // context t - r
                    let gt = grad.entity_mut(t.tail);
                    for k in 0..dim {
                        gt[k] = gt[k] - share * diff[k];
                    }
                    let gr = grad.relation_mut(t.relation);
                    for k in 0..dim {
                        gr[k] = gr[k] + share * diff[k];
                    }
                }
                Role::Tail => {
                    // context h + r
                    let gh = grad.entity_mut(t.head);
                    for k in 0..dim {
                        gh[k] = gh[k] - share * diff[k];
                    }
                    let gr = grad.relation_mut(t.relation);
                    for k in 0..dim {
                        gr[k] = gr[k] - share * diff[k];
                    }
                }
            }
        }
    }
    for &r in relations {
        let Some(rec) = mae_reconstruct_relation(r, nb, params) else {
            continue;
        };
        let v = params.relation(r);
        for k in 0..dim {
            diff[k] = v[k] - rec[k];
            let d = diff[k].to_f64().unwrap_or(f64::NAN);
            total += d * d;
        }
        let ctx = &nb.relation_ctx[r];
        let share = two / T::from(ctx.len()).expect("count");
        let g = grad.relation_mut(r);
        for k in 0..dim {
            g[k] = g[k] + two * diff[k];
        }
        for &idx in ctx {
            let t = nb.triples[idx];
            let gt = grad.entity_mut(t.tail);
            for k in 0..dim {
                gt[k] = gt[k] - share * diff[k];
            }
            let gh = grad.entity_mut(t.head);
            for k in 0..dim {
                gh[k] = gh[k] + share * diff[k];
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::score::{Norm, TransE};

    fn lt(head: usize, relation: usize, tail: usize) -> LocalTriple {
        LocalTriple {
            head,
            relation,
            tail,
        }
    }

    /// 1-d entities so scores are easy to set: f = |h + r - t|.
    fn hinge_params(fp: f64, fneg: f64) -> (Params<f64>, (LocalTriple, LocalTriple)) {
        let mut p = Params::zeros(1, 4, 1);
        // pos: h=0 (value 0), t=1 (value fp); neg: h=2 (0), t=3 (fneg)
        p.entity_mut(1)[0] = fp;
        p.entity_mut(3)[0] = fneg;
        (p, (lt(0, 0, 1), lt(2, 0, 3)))
    }

    #[test]
    fn inactive_hinge_contributes_nothing() {
        let (p, pair) = hinge_params(0.2, 1.5);
        let mut g = p.zeros_like();
        let l = kge_loss(&[pair], &p, 1.0, &TransE::new(Norm::L1), &mut g);
        assert_eq!(l, 0.0);
        assert!(g.entities.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn active_hinge_value() {
        let (p, pair) = hinge_params(1.5, 0.2);
        let mut g = p.zeros_like();
        let l = kge_loss(&[pair], &p, 1.0, &TransE::new(Norm::L1), &mut g);
        assert!((l - 2.3).abs() < 1e-12);
    }

    #[test]
    fn ra_values() {
        let mut p = Params::<f64>::zeros(2, 0, 2);
        p.relation_mut(0).copy_from_slice(&[1.0, 2.0]);
        p.relation_mut(1).copy_from_slice(&[2.0, 3.0]);
        let mut g = p.zeros_like();
        assert_eq!(ra_loss(&[(0, vec![1.0, 2.0])], &p, &mut g), 0.0);
        assert_eq!(ra_loss(&[(1, vec![1.0, 2.0])], &p, &mut g), 2.0);
        assert_eq!(g.relation(1), &[2.0, 2.0]);
        // relation 0 has zero drift, so zero gradient
        assert_eq!(g.relation(0), &[0.0, 0.0]);
    }

    #[test]
    fn entity_reconstruction() {
        // entity 0 is head of (0, r0, 1): context t - r
        let mut p = Params::<f64>::zeros(2, 4, 2);
        p.entity_mut(1).copy_from_slice(&[3.0, 1.0]);
        p.relation_mut(0).copy_from_slice(&[1.0, 1.0]);
        let nb = Neighborhoods::new(&[lt(0, 0, 1)], 4, 2);
        assert_eq!(mae_reconstruct_entity(0, &nb, &p).unwrap(), vec![2.0, 0.0]);

        // entity 3 with contexts [1,0] (as head) and [3,0] (as tail)
        p.entity_mut(2).copy_from_slice(&[2.0, -1.0]);
        p.relation_mut(1).copy_from_slice(&[1.0, 1.0]);
        let nb = Neighborhoods::new(&[lt(3, 0, 1), lt(2, 1, 3)], 4, 2);
        // t - r = [3,1] - [1,1] = [2,0]; h + r = [2,-1] + [1,1] = [3,0]
        assert_eq!(mae_reconstruct_entity(3, &nb, &p).unwrap(), vec![2.5, 0.0]);
        assert!(mae_reconstruct_entity(0, &nb, &p).is_none());
    }

    #[test]
    fn entity_reconstruction_hand_mean() {
        // contexts [1,0] and [3,0] -> [2,0]
        let mut p = Params::<f64>::zeros(2, 3, 1);
        p.entity_mut(1).copy_from_slice(&[1.0, 0.0]);
        p.entity_mut(2).copy_from_slice(&[3.0, 0.0]);
        let nb = Neighborhoods::new(&[lt(0, 0, 1), lt(0, 0, 2)], 3, 1);
        assert_eq!(mae_reconstruct_entity(0, &nb, &p).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn relation_reconstruction() {
        let mut p = Params::<f64>::zeros(2, 4, 2);
        p.entity_mut(1).copy_from_slice(&[1.0, 1.0]);
        let nb = Neighborhoods::new(&[lt(0, 0, 1)], 4, 2);
        assert_eq!(mae_reconstruct_relation(0, &nb, &p).unwrap(), vec![1.0, 1.0]);
        // t - h = [0,2] and [2,0]
        p.entity_mut(2).copy_from_slice(&[0.0, 2.0]);
        p.entity_mut(3).copy_from_slice(&[2.0, 0.0]);
        let nb = Neighborhoods::new(&[lt(0, 0, 2), lt(0, 0, 3)], 4, 2);
        assert_eq!(mae_reconstruct_relation(0, &nb, &p).unwrap(), vec![1.0, 1.0]);
        assert!(mae_reconstruct_relation(1, &nb, &p).is_none());
    }

    #[test]
    fn mae_values() {
        let mut p = Params::<f64>::zeros(2, 2, 1);
        // e0 head of (0, r0, 1): e0_bar = e1 - r0
        p.entity_mut(1).copy_from_slice(&[1.0, 1.0]);
        p.relation_mut(0).copy_from_slice(&[1.0, 1.0]);
        let nb = Neighborhoods::new(&[lt(0, 0, 1)], 2, 1);
        let mut g = p.zeros_like();
        // every embedding equals its reconstruction
        assert_eq!(mae_loss(&[0, 1], &[0], &nb, &p, &mut g), 0.0);
        p.entity_mut(0).copy_from_slice(&[1.0, 0.0]);
        p.entity_mut(1).copy_from_slice(&[1.0, 1.0]);
        p.relation_mut(0).copy_from_slice(&[1.0, 1.0]);
        let mut g = p.zeros_like();
        assert_eq!(mae_loss(&[0], &[], &nb, &p, &mut g), 1.0);
    }
}
