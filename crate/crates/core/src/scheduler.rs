//! Coding groups, their order, the EGR rearrangement and group masks.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Order {
    /// Spatial first: both phases of a segment before the next segment.
    Sfo,
    /// Channel first: all anchors, then all non-anchors.
    Cfo,
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Order::Sfo => "sfo",
            Order::Cfo => "cfo",
        })
    }
}

impl FromStr for Order {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sfo" => Ok(Order::Sfo),
            "cfo" => Ok(Order::Cfo),
            _ => Err(Error::Config(format!("unknown order `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    /// Checker parity `(u + v)` even.
    Anchor = 0,
    NonAnchor = 1,
}

impl Phase {
    pub fn of(u: usize, v: usize) -> Phase {
        if (u + v) % 2 == 0 {
            Phase::Anchor
        } else {
            Phase::NonAnchor
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroupId {
    pub segment: usize,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodingSchedule {
    n_cs: usize,
    order: Order,
    sfg: bool,
    groups: Vec<GroupId>,
}

impl CodingSchedule {
    pub fn build(n_cs: usize, order: Order, sfg: bool) -> Result<Self> {
        if n_cs == 0 {
            return Err(Error::Config("n_cs must be at least 1".into()));
        }
        let mut groups = Vec::with_capacity(2 * n_cs);
        match order {
            Order::Sfo => {
                for segment in 0..n_cs {
                    for phase in [Phase::Anchor, Phase::NonAnchor] {
                        groups.push(GroupId { segment, phase });
                    }
                }
            }
            Order::Cfo => {
                for phase in [Phase::Anchor, Phase::NonAnchor] {
                    for segment in 0..n_cs {
                        groups.push(GroupId { segment, phase });
                    }
                }
            }
        }
        Ok(Self {
            n_cs,
            order,
            sfg,
            groups,
        })
    }

    pub fn n_cs(&self) -> usize {
        self.n_cs
    }

    pub fn order(&self) -> Order {
        self.order
    }

    pub fn sfg(&self) -> bool {
        self.sfg
    }

    pub fn groups(&self) -> &[GroupId] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group(&self, g: usize) -> GroupId {
        self.groups[g]
    }

    /// Position of `(segment, phase)` in the coding order.
    pub fn index_of(&self, segment: usize, phase: Phase) -> usize {
        match self.order {
            Order::Sfo => 2 * segment + phase.index(),
            Order::Cfo => phase.index() * self.n_cs + segment,
        }
    }

    /// Whether group `g` is coded from hyperprior features alone.
    pub fn hyperprior_only(&self, g: usize) -> bool {
        self.sfg && g == 0
    }

    /// Number of context-model invocations for one full decode.
    pub fn context_invocations(&self) -> usize {
        2 * self.n_cs - usize::from(self.sfg)
    }
}

/// Latent column of rearranged column `w` in row `u` for the given phase.
#[inline]
pub fn egr_column(u: usize, w: usize, phase: Phase) -> usize {
    2 * w + (u + phase.index()) % 2
}

fn check_latent(shape: &[usize], sched: &CodingSchedule) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::shape("egr", format!("latent must be rank 3, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if w % 2 != 0 {
        return Err(Error::shape("egr", format!("latent width {w} is odd")));
    }
    if c % sched.n_cs() != 0 {
        return Err(Error::shape(
            "egr",
            format!("{c} channels not divisible into {} segments", sched.n_cs()),
        ));
    }
    Ok((c, h, w))
}

/// `(C, H, W)` latent to `(2·N_cs, H, W/2, p_cs)` group planes.
pub fn egr_rearrange<T: Copy + Default>(
    latent: &Tensor<T>,
    sched: &CodingSchedule,
) -> Result<Tensor<T>> {
    let (c, h, w) = check_latent(latent.shape(), sched)?;
    let p_cs = c / sched.n_cs();
    let wr = w / 2;
    let src = latent.data();
    let mut out = vec![T::default(); src.len()];
    for (g, gid) in sched.groups().iter().enumerate() {
        for u in 0..h {
            for x in 0..wr {
                let v = egr_column(u, x, gid.phase);
                let base = ((g * h + u) * wr + x) * p_cs;
                for j in 0..p_cs {
                    out[base + j] = src[((gid.segment * p_cs + j) * h + u) * w + v];
                }
            }
        }
    }
    Tensor::new(vec![2 * sched.n_cs(), h, wr, p_cs], out)
}

pub fn inverse_egr<T: Copy + Default>(r: &Tensor<T>, sched: &CodingSchedule) -> Result<Tensor<T>> {
    let s = r.shape();
    if s.len() != 4 || s[0] != 2 * sched.n_cs() {
        return Err(Error::shape(
            "inverse_egr",
            format!("expected (2·{}, H, W/2, p_cs), got {s:?}", sched.n_cs()),
        ));
    }
    let (h, wr, p_cs) = (s[1], s[2], s[3]);
    let (c, w) = (p_cs * sched.n_cs(), 2 * wr);
    let src = r.data();
    let mut out = vec![T::default(); src.len()];
    for (g, gid) in sched.groups().iter().enumerate() {
        for u in 0..h {
            for x in 0..wr {
                let v = egr_column(u, x, gid.phase);
                let base = ((g * h + u) * wr + x) * p_cs;
                for j in 0..p_cs {
                    out[((gid.segment * p_cs + j) * h + u) * w + v] = src[base + j];
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Coding group of latent element `(c, u, v)`.
pub fn group_of_element(sched: &CodingSchedule, p_cs: usize, c: usize, u: usize, v: usize) -> usize {
    sched.index_of(c / p_cs, Phase::of(u, v))
}

/// Which key groups a query group may attend.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskRule {
    /// Only strictly earlier groups (the causal rule).
    #[default]
    StrictlyEarlier,
    /// Also the query's own group. Not causal; used for fault injection.
    IncludeSameGroup,
}

impl MaskRule {
    #[inline]
    pub fn allows(self, query_group: usize, key_group: usize) -> bool {
        match self {
            MaskRule::StrictlyEarlier => key_group < query_group,
            MaskRule::IncludeSameGroup => key_group <= query_group,
        }
    }
}

/// Additive mask `(queries × tokens)`: 0 where the token's group is strictly
/// earlier than the query's, `-inf` elsewhere.
pub fn group_causal_mask<S: Scalar>(token_groups: &[usize], query_groups: &[usize]) -> Tensor<S> {
    group_mask_with(MaskRule::StrictlyEarlier, token_groups, query_groups)
}

pub fn group_mask_with<S: Scalar>(
    rule: MaskRule,
    token_groups: &[usize],
    query_groups: &[usize],
) -> Tensor<S> {
    let n = token_groups.len();
    Tensor::from_fn(vec![query_groups.len(), n], |i| {
        if rule.allows(query_groups[i / n], token_groups[i % n]) {
            S::zero()
        } else {
            S::neg_infinity()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(segment: usize, phase: Phase) -> GroupId {
        GroupId { segment, phase }
    }

    #[test]
    fn schedule_examples() {
        use Phase::*;
        let s = CodingSchedule::build(4, Order::Sfo, true).unwrap();
        let want: Vec<GroupId> = (0..4)
            .flat_map(|i| [g(i, Anchor), g(i, NonAnchor)])
            .collect();
        assert_eq!(s.groups(), &want[..]);
        assert_eq!(s.context_invocations(), 7);

        let s = CodingSchedule::build(1, Order::Sfo, false).unwrap();
        assert_eq!(s.groups(), &[g(0, Anchor), g(0, NonAnchor)]);
        assert_eq!(s.context_invocations(), 2);

        let s = CodingSchedule::build(2, Order::Cfo, false).unwrap();
        assert_eq!(
            s.groups(),
            &[g(0, Anchor), g(1, Anchor), g(0, NonAnchor), g(1, NonAnchor)]
        );
        assert!(CodingSchedule::build(0, Order::Sfo, false).is_err());
    }

    #[test]
    fn index_formula_matches_position() {
        for order in [Order::Sfo, Order::Cfo] {
            let s = CodingSchedule::build(3, order, false).unwrap();
            for (i, gid) in s.groups().iter().enumerate() {
                assert_eq!(s.index_of(gid.segment, gid.phase), i);
            }
        }
    }

    #[test]
    fn two_by_two_rearrangement() {
        // [[a,b],[c,d]] -> anchor plane rows [a],[d]; non-anchor rows [b],[c]
        let s = CodingSchedule::build(1, Order::Sfo, false).unwrap();
        let x = Tensor::new(vec![1, 2, 2], vec!['a', 'b', 'c', 'd']).unwrap();
        let r = egr_rearrange(&x, &s).unwrap();
        assert_eq!(r.shape(), &[2, 2, 1, 1]);
        assert_eq!(r.data(), &['a', 'd', 'b', 'c']);
        assert_eq!(inverse_egr(&r, &s).unwrap(), x);
    }

    #[test]
    fn rejects_bad_shapes() {
        let s = CodingSchedule::build(2, Order::Sfo, false).unwrap();
        assert!(egr_rearrange(&Tensor::filled(vec![2, 2, 3], 0u8), &s).is_err());
        assert!(egr_rearrange(&Tensor::filled(vec![3, 2, 2], 0u8), &s).is_err());
    }

    #[test]
    fn mask_examples() {
        let m = group_causal_mask::<f32>(&[0, 1], &[0, 1]);
        let ninf = f32::NEG_INFINITY;
        assert_eq!(m.data(), &[ninf, ninf, 0.0, ninf]);
        let m = group_causal_mask::<f32>(&[3, 3, 3], &[3, 3]);
        assert!(m.data().iter().all(|&v| v == ninf));
    }
}
