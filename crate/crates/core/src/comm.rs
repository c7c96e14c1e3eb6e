//! Simulated message-passing fabric with exact element accounting.
//!
//! Every collective is decomposed into point-to-point sends so the
//! ledger counts derive from first principles: ring schedules for
//! all_reduce / all_gather / reduce_scatter, root fan-out for broadcast,
//! direct sends for reduce. Reductions always sum contributions in
//! ascending member-rank order, so results are bit-identical across
//! runs and across both scheduler modes.
//!
//! Accounting conventions (m = full tensor elements, g = group size):
//!   broadcast        (g-1) * m
//!   all_reduce     2*(g-1) * m
//!   all_gather       (g-1) * m
//!   reduce_scatter   (g-1) * m
//!   reduce           (g-1) * m
//!   ring_shift         g   * m   per shift

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Condvar, Mutex};

use thiserror::Error;

use crate::mesh::CommGroup;
use crate::tensor::{DenseTensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CommError {
    #[error("unknown rank {0}")]
    UnknownRank(usize),
    #[error("rank {0} cannot send to itself")]
    SelfSend(usize),
    #[error("deadlock: every live rank is blocked on recv")]
    Deadlock,
    #[error("run aborted by failure on another rank")]
    Aborted,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("payload length not divisible: {0}")]
    IndivisibleLength(String),
    #[error("root rank {root} not in group {group}")]
    RootNotInGroup { root: usize, group: String },
    #[error("rank {rank} not a member of group {group}")]
    NotInGroup { rank: usize, group: String },
}

impl From<TensorError> for CommError {
    fn from(e: TensorError) -> Self {
        CommError::ShapeMismatch(e.to_string())
    }
}

/// Which execution mode drives the rank programs. Observable results
/// (tensor values and ledger totals) are identical in both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheduler {
    /// One worker thread per rank with blocking channels.
    Threads,
    /// Cooperative round-robin: only the turn-holding rank may perform
    /// a fabric operation; the turn rotates after each one.
    RoundRobin,
}

/// Ledger channel. `Verification` traffic (gathers done only to check
/// results against serial oracles) is kept out of experiment totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LedgerChannel {
    Experiment,
    Verification,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub elements_sent: u64,
    pub elements_received: u64,
}

/// Per-rank, per-group, per-primitive element counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    counters: BTreeMap<(LedgerChannel, String, String, usize), Counts>,
}

impl CommLedger {
    fn credit(&mut self, ch: LedgerChannel, prim: &str, group: &str, from: usize, to: usize, n: u64) {
        if n == 0 {
            return;
        }
        self.counters
            .entry((ch, prim.to_string(), group.to_string(), from))
            .or_default()
            .elements_sent += n;
        self.counters
            .entry((ch, prim.to_string(), group.to_string(), to))
            .or_default()
            .elements_received += n;
    }

    /// Total elements sent on a channel, optionally for one primitive.
    pub fn total_sent(&self, ch: LedgerChannel, primitive: Option<&str>) -> u64 {
        self.counters
            .iter()
            .filter(|((c, p, _, _), _)| *c == ch && primitive.is_none_or(|want| p == want))
            .map(|(_, v)| v.elements_sent)
            .sum()
    }

    pub fn total_received(&self, ch: LedgerChannel, primitive: Option<&str>) -> u64 {
        self.counters
            .iter()
            .filter(|((c, p, _, _), _)| *c == ch && primitive.is_none_or(|want| p == want))
            .map(|(_, v)| v.elements_received)
            .sum()
    }

    /// Total elements sent within groups whose id starts with `prefix`.
    pub fn sent_in_groups(&self, ch: LedgerChannel, prefix: &str) -> u64 {
        self.counters
            .iter()
            .filter(|((c, _, g, _), _)| *c == ch && g.starts_with(prefix))
            .map(|(_, v)| v.elements_sent)
            .sum()
    }

    pub fn counts_for_rank(&self, ch: LedgerChannel, rank: usize) -> Counts {
        let mut out = Counts::default();
        for ((c, _, _, r), v) in &self.counters {
            if *c == ch && *r == rank {
                out.elements_sent += v.elements_sent;
                out.elements_received += v.elements_received;
            }
        }
        out
    }

    /// RFC-4180-style CSV export with deterministic row order.
    pub fn to_csv(&self, ch: LedgerChannel) -> String {
        let mut out = String::from("primitive,group,rank,elements_sent,elements_received\n");
        for ((c, prim, group, rank), v) in &self.counters {
            if *c == ch {
                out.push_str(&format!(
                    "{prim},{group},{rank},{},{}\n",
                    v.elements_sent, v.elements_received
                ));
            }
        }
        out
    }
}

enum MsgData {
    Tensor(DenseTensor),
    /// A shard plus the group position it originated from.
    Block { origin: usize, tensor: DenseTensor },
    /// Raw contributions tagged by group position; carried by the
    /// reduce-scatter ring so the final owner can sum them in ascending
    /// order. The counted element volume is the partial-sum size a real
    /// ring would transfer, not the tag overhead.
    Tagged(Vec<(usize, Vec<f64>)>),
}

struct Msg {
    data: MsgData,
}

struct State {
    /// Mailbox per (from, to) pair; FIFO delivery.
    boxes: Vec<VecDeque<Msg>>,
    /// `recv_waiting[r] = Some(from)` while rank r is blocked in recv.
    recv_waiting: Vec<Option<usize>>,
    done: Vec<bool>,
    finished: usize,
    poisoned: Option<CommError>,
    turn: usize,
}

impl State {
    fn box_idx(&self, world: usize, from: usize, to: usize) -> usize {
        from * world + to
    }

    fn advance_turn(&mut self, world: usize) {
        if self.finished == world {
            return;
        }
        loop {
            self.turn = (self.turn + 1) % world;
            if !self.done[self.turn] {
                return;
            }
        }
    }

    /// True when every unfinished rank is blocked on a recv whose
    /// awaited mailbox is empty.
    fn is_deadlocked(&self, world: usize) -> bool {
        (0..world).all(|r| {
            self.done[r]
                || matches!(self.recv_waiting[r],
                    Some(from) if self.boxes[from * world + r].is_empty())
        })
    }
}

struct Shared {
    world: usize,
    roundrobin: bool,
    st: Mutex<State>,
    cv: Condvar,
    ledger: Mutex<CommLedger>,
}

impl Shared {
    fn new(world: usize, sched: Scheduler) -> Self {
        Shared {
            world,
            roundrobin: sched == Scheduler::RoundRobin,
            st: Mutex::new(State {
                boxes: (0..world * world).map(|_| VecDeque::new()).collect(),
                recv_waiting: vec![None; world],
                done: vec![false; world],
                finished: 0,
                poisoned: None,
                turn: 0,
            }),
            cv: Condvar::new(),
            ledger: Mutex::new(CommLedger::default()),
        }
    }

    fn poison(&self, err: CommError) {
        let mut st = self.st.lock().unwrap();
        if st.poisoned.is_none() {
            st.poisoned = Some(err);
        }
        self.cv.notify_all();
    }

    fn finish(&self, rank: usize) {
        let mut st = self.st.lock().unwrap();
        st.done[rank] = true;
        st.finished += 1;
        if self.roundrobin && st.turn == rank {
            st.advance_turn(self.world);
        }
        if st.poisoned.is_none() && st.finished < self.world && st.is_deadlocked(self.world) {
            st.poisoned = Some(CommError::Deadlock);
        }
        self.cv.notify_all();
    }

    fn push(&self, me: usize, to: usize, msg: Msg) -> Result<(), CommError> {
        let mut st = self.st.lock().unwrap();
        loop {
            if let Some(e) = &st.poisoned {
                return Err(e.clone());
            }
            if !self.roundrobin || st.turn == me {
                let idx = st.box_idx(self.world, me, to);
                st.boxes[idx].push_back(msg);
                if self.roundrobin {
                    st.advance_turn(self.world);
                }
                self.cv.notify_all();
                return Ok(());
            }
            st = self.cv.wait(st).unwrap();
        }
    }

    fn pop(&self, me: usize, from: usize) -> Result<Msg, CommError> {
        let mut st = self.st.lock().unwrap();
        loop {
            if let Some(e) = st.poisoned.clone() {
                st.recv_waiting[me] = None;
                return Err(e);
            }
            if !self.roundrobin || st.turn == me {
                let idx = st.box_idx(self.world, from, me);
                if let Some(msg) = st.boxes[idx].pop_front() {
                    st.recv_waiting[me] = None;
                    if self.roundrobin {
                        st.advance_turn(self.world);
                    }
                    self.cv.notify_all();
                    return Ok(msg);
                }
                st.recv_waiting[me] = Some(from);
                if st.is_deadlocked(self.world) {
                    st.recv_waiting[me] = None;
                    st.poisoned = Some(CommError::Deadlock);
                    self.cv.notify_all();
                    return Err(CommError::Deadlock);
                }
                if self.roundrobin {
                    st.advance_turn(self.world);
                    self.cv.notify_all();
                }
            }
            st = self.cv.wait(st).unwrap();
        }
    }
}

/// Handle a rank program uses to talk to the fabric.
pub struct RankCtx<'a> {
    rank: usize,
    shared: &'a Shared,
    channel: LedgerChannel,
}

/// Even-as-possible contiguous chunk boundaries: first `m % g` chunks
/// get one extra element.
fn chunk_bounds(m: usize, g: usize) -> Vec<(usize, usize)> {
    let base = m / g;
    let extra = m % g;
    let mut bounds = Vec::with_capacity(g);
    let mut off = 0;
    for i in 0..g {
        let len = base + usize::from(i < extra);
        bounds.push((off, off + len));
        off += len;
    }
    bounds
}

impl<'a> RankCtx<'a> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.shared.world
    }

    pub fn set_channel(&mut self, ch: LedgerChannel) {
        self.channel = ch;
    }

    pub fn channel(&self) -> LedgerChannel {
        self.channel
    }

    fn credit(&self, prim: &str, group: &str, from: usize, to: usize, n: u64) {
        self.shared
            .ledger
            .lock()
            .unwrap()
            .credit(self.channel, prim, group, from, to, n);
    }

    fn send_internal(
        &self,
        to: usize,
        data: MsgData,
        counted: u64,
        prim: &str,
        group: &str,
    ) -> Result<(), CommError> {
        self.credit(prim, group, self.rank, to, counted);
        self.shared.push(self.rank, to, Msg { data })
    }

    fn recv_internal(&self, from: usize) -> Result<MsgData, CommError> {
        Ok(self.shared.pop(self.rank, from)?.data)
    }

    fn recv_tensor_internal(&self, from: usize) -> Result<DenseTensor, CommError> {
        match self.recv_internal(from)? {
            MsgData::Tensor(t) => Ok(t),
            _ => Err(CommError::ShapeMismatch("unexpected message kind".into())),
        }
    }

    /// Point-to-point send. FIFO per (sender, receiver) pair.
    pub fn send(&self, to: usize, payload: &DenseTensor) -> Result<(), CommError> {
        if to >= self.shared.world {
            return Err(CommError::UnknownRank(to));
        }
        if to == self.rank {
            return Err(CommError::SelfSend(self.rank));
        }
        self.send_internal(to, MsgData::Tensor(payload.clone()), payload.len() as u64, "p2p", "p2p")
    }

    /// Blocking point-to-point receive from a specific sender.
    pub fn recv(&self, from: usize) -> Result<DenseTensor, CommError> {
        if from >= self.shared.world {
            return Err(CommError::UnknownRank(from));
        }
        if from == self.rank {
            return Err(CommError::SelfSend(self.rank));
        }
        self.recv_tensor_internal(from)
    }

    fn my_position(&self, group: &CommGroup) -> Result<usize, CommError> {
        group.position_of(self.rank).ok_or(CommError::NotInGroup {
            rank: self.rank,
            group: group.id.clone(),
        })
    }

    /// Root fan-out broadcast; total volume (g-1)*m. Zero-element acks
    /// keep the entry contract (no member returns before all enter)
    /// without affecting counts.
    pub fn broadcast(
        &self,
        group: &CommGroup,
        root: usize,
        payload: Option<&DenseTensor>,
    ) -> Result<DenseTensor, CommError> {
        self.my_position(group)?;
        if group.position_of(root).is_none() {
            return Err(CommError::RootNotInGroup { root, group: group.id.clone() });
        }
        let empty = DenseTensor::new(vec![1], vec![0.0]).unwrap();
        if self.rank == root {
            let t = payload.ok_or_else(|| {
                CommError::ShapeMismatch("broadcast root must supply a payload".into())
            })?;
            for &m in &group.ranks {
                if m != root {
                    self.send_internal(
                        m,
                        MsgData::Tensor(t.clone()),
                        t.len() as u64,
                        "broadcast",
                        &group.id,
                    )?;
                }
            }
            for &m in &group.ranks {
                if m != root {
                    self.recv_internal(m)?; // ack
                }
            }
            Ok(t.clone())
        } else {
            let t = self.recv_tensor_internal(root)?;
            self.send_internal(root, MsgData::Tensor(empty), 0, "broadcast", &group.id)?;
            Ok(t)
        }
    }

    /// Ring reduce-scatter core over explicit chunk boundaries. Returns
    /// this member's chunk, summed over contributions in ascending
    /// group-position order.
    fn reduce_scatter_core(
        &self,
        group: &CommGroup,
        data: &[f64],
        bounds: &[(usize, usize)],
        prim: &str,
    ) -> Result<Vec<f64>, CommError> {
        let g = group.size();
        let q = self.my_position(group)?;
        if g == 1 {
            return Ok(data.to_vec());
        }
        let next = group.ranks[(q + 1) % g];
        let prev = group.ranks[(q + g - 1) % g];
        let chunk = |b: usize| data[bounds[b].0..bounds[b].1].to_vec();
        let wrap = |v: i64| v.rem_euclid(g as i64) as usize;

        let mut carried: Vec<(usize, Vec<f64>)> = Vec::new();
        for t in 0..g - 1 {
            // Chunk b travels positions (b+1), (b+2), ..., ending at b.
            let b_send = wrap(q as i64 - 1 - t as i64);
            let list = if t == 0 {
                vec![(q, chunk(b_send))]
            } else {
                std::mem::take(&mut carried)
            };
            let counted = (bounds[b_send].1 - bounds[b_send].0) as u64;
            self.send_internal(next, MsgData::Tagged(list), counted, prim, &group.id)?;

            let b_recv = wrap(q as i64 - 2 - t as i64);
            let mut list = match self.recv_internal(prev)? {
                MsgData::Tagged(l) => l,
                _ => return Err(CommError::ShapeMismatch("unexpected message kind".into())),
            };
            let mine = chunk(b_recv);
            if list.iter().any(|(_, c)| c.len() != mine.len()) {
                return Err(CommError::ShapeMismatch(
                    "reduce_scatter contributions differ in length".into(),
                ));
            }
            list.push((q, mine));
            carried = list;
        }
        // carried is chunk q with all g contributions.
        carried.sort_by_key(|(pos, _)| *pos);
        let mut acc = carried[0].1.clone();
        for (_, c) in carried.iter().skip(1) {
            for (a, v) in acc.iter_mut().zip(c) {
                *a += v;
            }
        }
        Ok(acc)
    }

    /// Ring all-gather core; returns blocks indexed by group position.
    /// `counts` overrides the ledger credit per origin position, for
    /// callers whose payloads carry padding (uneven all_reduce chunks).
    fn all_gather_core(
        &self,
        group: &CommGroup,
        mine: DenseTensor,
        prim: &str,
        check_shape: bool,
        counts: Option<&[u64]>,
    ) -> Result<Vec<DenseTensor>, CommError> {
        let g = group.size();
        let q = self.my_position(group)?;
        if g == 1 {
            return Ok(vec![mine]);
        }
        let next = group.ranks[(q + 1) % g];
        let prev = group.ranks[(q + g - 1) % g];
        let mut collected: Vec<Option<DenseTensor>> = vec![None; g];
        let my_shape = mine.shape().to_vec();
        let mut carried = (q, mine.clone());
        collected[q] = Some(mine);
        for t in 0..g - 1 {
            let counted = match counts {
                Some(c) => c[carried.0],
                None => carried.1.len() as u64,
            };
            self.send_internal(
                next,
                MsgData::Block { origin: carried.0, tensor: carried.1.clone() },
                counted,
                prim,
                &group.id,
            )?;
            let (origin, tensor) = match self.recv_internal(prev)? {
                MsgData::Block { origin, tensor } => (origin, tensor),
                _ => return Err(CommError::ShapeMismatch("unexpected message kind".into())),
            };
            if check_shape && tensor.shape() != my_shape.as_slice() {
                return Err(CommError::ShapeMismatch(format!(
                    "all_gather shard shapes differ: {:?} vs {:?}",
                    tensor.shape(),
                    my_shape
                )));
            }
            let _ = t;
            carried = (origin, tensor.clone());
            collected[origin] = Some(tensor);
        }
        Ok(collected.into_iter().map(|b| b.expect("ring covered all positions")).collect())
    }

    /// Concatenates equal-shape shards in ascending member-rank order
    /// along axis 0. Total volume (g-1)*m with m = full tensor size.
    pub fn all_gather(&self, group: &CommGroup, shard: &DenseTensor) -> Result<DenseTensor, CommError> {
        let blocks = self.all_gather_core(group, shard.clone(), "all_gather", true, None)?;
        let mut shape = shard.shape().to_vec();
        shape[0] *= group.size();
        let mut data = Vec::with_capacity(shard.len() * group.size());
        for b in &blocks {
            data.extend_from_slice(b.data());
        }
        Ok(DenseTensor::new(shape, data)?)
    }

    /// Leaves this member with its slice of the elementwise sum. The
    /// flattened payload must divide evenly by the group size; the
    /// result is the position-th contiguous chunk as a 1-D tensor.
    pub fn reduce_scatter(
        &self,
        group: &CommGroup,
        payload: &DenseTensor,
    ) -> Result<DenseTensor, CommError> {
        let g = group.size();
        let m = payload.len();
        if m % g != 0 {
            return Err(CommError::IndivisibleLength(format!(
                "reduce_scatter: {m} elements over {g} members"
            )));
        }
        let bounds = chunk_bounds(m, g);
        let out = self.reduce_scatter_core(group, payload.data(), &bounds, "reduce_scatter")?;
        Ok(DenseTensor::new(vec![m / g], out)?)
    }

    /// Ring reduce-scatter + ring all-gather; every member ends with the
    /// elementwise sum over all contributions, computed in ascending
    /// member-rank order. Total volume 2*(g-1)*m.
    pub fn all_reduce(&self, group: &CommGroup, payload: &DenseTensor) -> Result<DenseTensor, CommError> {
        let g = group.size();
        if g == 1 {
            self.my_position(group)?;
            return Ok(payload.clone());
        }
        let m = payload.len();
        let bounds = chunk_bounds(m, g);
        let my_chunk = self.reduce_scatter_core(group, payload.data(), &bounds, "all_reduce")?;
        let chunk_t = DenseTensor::new(vec![my_chunk.len().max(1)], if my_chunk.is_empty() { vec![0.0] } else { my_chunk.clone() })?;
        // Gather chunks; uneven lengths allowed, so skip the shape check
        // and reassemble by position. Padded placeholder chunks must be
        // credited at their true (possibly zero) length.
        let counts: Vec<u64> = bounds.iter().map(|(lo, hi)| (hi - lo) as u64).collect();
        let blocks = self.all_gather_core(group, chunk_t, "all_reduce", false, Some(&counts))?;
        let mut data = Vec::with_capacity(m);
        for (i, b) in blocks.iter().enumerate() {
            let want = bounds[i].1 - bounds[i].0;
            data.extend_from_slice(&b.data()[..want]);
        }
        if data.len() != m {
            return Err(CommError::ShapeMismatch("all_reduce reassembly".into()));
        }
        Ok(DenseTensor::new(payload.shape().to_vec(), data)?)
    }

    /// Reduce-to-root via direct sends; total volume (g-1)*m. Returns
    /// the sum at the root, None elsewhere.
    pub fn reduce(
        &self,
        group: &CommGroup,
        root: usize,
        payload: &DenseTensor,
    ) -> Result<Option<DenseTensor>, CommError> {
        let q = self.my_position(group)?;
        let root_pos = group
            .position_of(root)
            .ok_or(CommError::RootNotInGroup { root, group: group.id.clone() })?;
        let g = group.size();
        if g == 1 {
            return Ok(Some(payload.clone()));
        }
        let empty = DenseTensor::new(vec![1], vec![0.0]).unwrap();
        if q == root_pos {
            let mut contributions: Vec<Option<DenseTensor>> = vec![None; g];
            contributions[q] = Some(payload.clone());
            for (pos, &m) in group.ranks.iter().enumerate() {
                if pos != q {
                    let t = self.recv_tensor_internal(m)?;
                    if t.shape() != payload.shape() {
                        return Err(CommError::ShapeMismatch(format!(
                            "reduce contributions differ: {:?} vs {:?}",
                            t.shape(),
                            payload.shape()
                        )));
                    }
                    contributions[pos] = Some(t);
                }
            }
            let mut acc = contributions[0].take().unwrap();
            for c in contributions.into_iter().skip(1) {
                acc.add_assign(&c.unwrap())?;
            }
            for &m in &group.ranks {
                if m != root {
                    self.send_internal(m, MsgData::Tensor(empty.clone()), 0, "reduce", &group.id)?;
                }
            }
            Ok(Some(acc))
        } else {
            self.send_internal(
                root,
                MsgData::Tensor(payload.clone()),
                payload.len() as u64,
                "reduce",
                &group.id,
            )?;
            self.recv_internal(root)?; // ack
            Ok(None)
        }
    }

    /// Each member receives the payload of its ring predecessor. Volume
    /// g*m per shift; a singleton group returns its own payload.
    pub fn ring_shift(&self, group: &CommGroup, payload: &DenseTensor) -> Result<DenseTensor, CommError> {
        let g = group.size();
        let q = self.my_position(group)?;
        if g == 1 {
            return Ok(payload.clone());
        }
        let next = group.ranks[(q + 1) % g];
        let prev = group.ranks[(q + g - 1) % g];
        self.send_internal(
            next,
            MsgData::Tensor(payload.clone()),
            payload.len() as u64,
            "ring_shift",
            &group.id,
        )?;
        let t = self.recv_tensor_internal(prev)?;
        if t.shape() != payload.shape() {
            return Err(CommError::ShapeMismatch(format!(
                "ring_shift shapes differ: {:?} vs {:?}",
                t.shape(),
                payload.shape()
            )));
        }
        Ok(t)
    }
}

#[derive(Debug)]
pub struct RunOutput<T> {
    /// Per-rank results, indexed by rank.
    pub results: Vec<T>,
    pub ledger: CommLedger,
}

/// Runs one program per rank under the chosen scheduler and returns the
/// per-rank results plus the communication ledger.
pub fn run_ranks<T, F>(world: usize, sched: Scheduler, f: F) -> Result<RunOutput<T>, CommError>
where
    T: Send,
    F: Fn(&mut RankCtx) -> Result<T, CommError> + Sync,
{
    assert!(world >= 1, "world_size must be >= 1");
    let shared = Shared::new(world, sched);
    let results: Vec<Result<T, CommError>> = std::thread::scope(|s| {
        let mut handles = Vec::with_capacity(world);
        for rank in 0..world {
            let shared = &shared;
            let f = &f;
            handles.push(s.spawn(move || {
                let mut ctx = RankCtx { rank, shared, channel: LedgerChannel::Experiment };
                let r = f(&mut ctx);
                if let Err(e) = &r {
                    // Unblock peers; first error wins.
                    shared.poison(match e {
                        CommError::Aborted => CommError::Aborted,
                        other => other.clone(),
                    });
                }
                shared.finish(rank);
                r
            }));
        }
        handles.into_iter().map(|h| h.join().expect("rank worker panicked")).collect()
    });

    let mut out = Vec::with_capacity(world);
    let mut first_err: Option<CommError> = None;
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(e) => {
                let significant = !matches!(e, CommError::Aborted);
                match &first_err {
                    None => first_err = Some(e),
                    Some(prev) if matches!(prev, CommError::Aborted) && significant => {
                        first_err = Some(e)
                    }
                    _ => {}
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let ledger = shared.ledger.into_inner().unwrap();
    Ok(RunOutput { results: out, ledger })
}
