//! Value table sharded across the embedding dimension over a group of workers.
//!
//! Workers are threads that talk only through bounded mailboxes. A forward
//! pass runs three barrier-separated phases:
//!
//! 1. every worker broadcasts its `(indices, weights)` to the whole group;
//! 2. every worker runs the bag lookup over *all* gathered positions, but only
//!    on its own column slice of the value table;
//! 3. every worker sends each peer the partial rows belonging to that peer's
//!    bags, and each worker concatenates the slices it receives.
//!
//! Backward runs the reverse route: output gradients are split by column and
//! sent to the owning shard, which accumulates its slice of the sparse
//! value gradient.
//!
//! Every output element is produced by exactly one shard with the same
//! accumulation order as the unsharded lookup, so results are bit-identical.

use crate::embedding_bag::{bag_backward, bag_forward, BagBatch, SparseGrad, Strategy};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::{Barrier, Mutex};

/// Fixed per-message envelope counted in `header_bytes`.
pub const HEADER_BYTES: u64 = 24;

const INDEX_BYTES: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Gather,
    Exchange,
    GradRoute,
}

/// Deliberate protocol corruption for exercising the error paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    Drop { phase: Phase, from: usize, to: usize },
    Duplicate { phase: Phase, from: usize, to: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum ShardMessage<T: Scalar> {
    IndexGather {
        source: usize,
        indices: Vec<usize>,
        weights: Vec<T>,
        bag_size: usize,
    },
    PartialEmbedding {
        source: usize,
        dest: usize,
        rows: usize,
        data: Vec<T>,
    },
    /// `data` is empty when the slice is entirely zero.
    GradSlice {
        source: usize,
        dest: usize,
        rows: usize,
        data: Vec<T>,
    },
}

impl<T: Scalar> ShardMessage<T> {
    fn source(&self) -> usize {
        match self {
            ShardMessage::IndexGather { source, .. }
            | ShardMessage::PartialEmbedding { source, .. }
            | ShardMessage::GradSlice { source, .. } => *source,
        }
    }

    fn phase(&self) -> Phase {
        match self {
            ShardMessage::IndexGather { .. } => Phase::Gather,
            ShardMessage::PartialEmbedding { .. } => Phase::Exchange,
            ShardMessage::GradSlice { .. } => Phase::GradRoute,
        }
    }

    pub fn payload_bytes(&self) -> u64 {
        let e = T::BYTES as u64;
        match self {
            ShardMessage::IndexGather { indices, .. } => indices.len() as u64 * (INDEX_BYTES + e),
            ShardMessage::PartialEmbedding { data, .. } | ShardMessage::GradSlice { data, .. } => data.len() as u64 * e,
        }
    }
}

/// Communication and memory accounting of one protocol run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShardReport {
    #[serde(rename = "G")]
    pub group_size: usize,
    /// Payload bytes that crossed between distinct workers.
    pub bytes_exchanged: u64,
    /// Payload of every partial-embedding message, self-deliveries included.
    pub phase3_bytes: u64,
    pub header_bytes: u64,
    /// Most slice-width rows any buffer on each worker held at once.
    pub peak_rows: Vec<usize>,
    /// Full-width rows each worker materialised (only ever its own bags).
    pub full_rows: Vec<usize>,
    pub messages: u64,
    pub received: u64,
}

impl ShardReport {
    fn absorb(&mut self, other: &ShardReport) {
        self.bytes_exchanged += other.bytes_exchanged;
        self.phase3_bytes += other.phase3_bytes;
        self.header_bytes += other.header_bytes;
        self.messages += other.messages;
        self.received += other.received;
        for (a, b) in self.peak_rows.iter_mut().zip(&other.peak_rows) {
            *a = (*a).max(*b);
        }
        for (a, b) in self.full_rows.iter_mut().zip(&other.full_rows) {
            *a = (*a).max(*b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct MemoryGroup<T: Scalar = f32> {
    dim: usize,
    shards: Vec<Tensor<T>>,
    fault: Option<Fault>,
}

/// Splits `v` (`[rows × n]`) into `g` column slices of width `n/g`.
pub fn shard_values<T: Scalar>(v: &Tensor<T>, g: usize) -> Result<MemoryGroup<T>> {
    let n = v.cols();
    if v.shape().len() != 2 {
        return Err(Error::dim(format!("value table must be 2-d, got {:?}", v.shape())));
    }
    if g == 0 || n % g != 0 {
        return Err(Error::config(format!("group size {g} does not divide width {n}")));
    }
    let w = n / g;
    let shards = (0..g)
        .map(|s| {
            let mut data = Vec::with_capacity(v.rows() * w);
            for r in 0..v.rows() {
                data.extend_from_slice(&v.row(r)[s * w..(s + 1) * w]);
            }
            Tensor::from_parts(vec![v.rows(), w], data)
        })
        .collect();
    Ok(MemoryGroup { dim: n, shards, fault: None })
}

impl<T: Scalar> MemoryGroup<T> {
    pub fn group_size(&self) -> usize {
        self.shards.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_rows(&self) -> usize {
        self.shards[0].rows()
    }

    pub fn shard(&self, g: usize) -> &Tensor<T> {
        &self.shards[g]
    }

    /// Column range owned by shard `g`.
    pub fn range(&self, g: usize) -> Range<usize> {
        let w = self.dim / self.group_size();
        g * w..(g + 1) * w
    }

    pub fn inject(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    /// Concatenates the shards back into the full table.
    pub fn unshard(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.num_rows() * self.dim);
        for r in 0..self.num_rows() {
            for s in &self.shards {
                data.extend_from_slice(s.row(r));
            }
        }
        Tensor::from_parts(vec![self.num_rows(), self.dim], data)
    }
}

/// Forward results plus what backward needs.
#[derive(Clone, Debug)]
pub struct ShardedForward<T: Scalar> {
    pub outputs: Vec<Tensor<T>>,
    pub report: ShardReport,
    gathered: BagBatch<T>,
    bags: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ShardedBackward<T: Scalar> {
    /// Per-shard gradient, each of width `n/G`.
    pub grads: Vec<SparseGrad<T>>,
    pub report: ShardReport,
}

/// Per-run wiring shared by all workers.
struct Wiring<T: Scalar> {
    g: usize,
    barrier: Barrier,
    failure: Mutex<Option<Error>>,
    fault: Option<Fault>,
    _marker: std::marker::PhantomData<T>,
}

struct Port<T: Scalar> {
    id: usize,
    inbox: Receiver<ShardMessage<T>>,
    peers: Vec<SyncSender<ShardMessage<T>>>,
    report: ShardReport,
}

impl<T: Scalar> Wiring<T> {
    fn new(g: usize, fault: Option<Fault>) -> (Self, Vec<Port<T>>) {
        let mut senders = Vec::with_capacity(g);
        let mut inboxes = Vec::with_capacity(g);
        for _ in 0..g {
            // room for one message per peer per phase plus an injected duplicate
            let (tx, rx) = sync_channel(g + 1);
            senders.push(tx);
            inboxes.push(rx);
        }
        let ports = inboxes
            .into_iter()
            .enumerate()
            .map(|(id, inbox)| Port {
                id,
                inbox,
                peers: senders.clone(),
                report: ShardReport {
                    group_size: g,
                    peak_rows: vec![0; g],
                    full_rows: vec![0; g],
                    ..ShardReport::default()
                },
            })
            .collect();
        let wiring = Self {
            g,
            barrier: Barrier::new(g),
            failure: Mutex::new(None),
            fault,
            _marker: std::marker::PhantomData,
        };
        (wiring, ports)
    }

    fn send(&self, port: &mut Port<T>, to: usize, msg: ShardMessage<T>) -> Result<()> {
        let phase = msg.phase();
        let copies = match self.fault {
            Some(Fault::Drop { phase: p, from, to: t }) if p == phase && from == port.id && t == to => 0,
            Some(Fault::Duplicate { phase: p, from, to: t }) if p == phase && from == port.id && t == to => 2,
            _ => 1,
        };
        for _ in 0..copies {
            let bytes = msg.payload_bytes();
            port.report.messages += 1;
            port.report.header_bytes += HEADER_BYTES;
            if to != port.id {
                port.report.bytes_exchanged += bytes;
            }
            if phase == Phase::Exchange {
                port.report.phase3_bytes += bytes;
            }
            port.peers[to]
                .send(msg.clone())
                .map_err(|_| Error::Protocol(format!("worker {to} hung up")))?;
        }
        Ok(())
    }

    /// Waits for every worker to finish sending, then takes exactly one message per source.
    fn collect(&self, port: &mut Port<T>, phase: Phase) -> Result<Vec<ShardMessage<T>>> {
        self.barrier.wait();
        let mut slots: Vec<Option<ShardMessage<T>>> = (0..self.g).map(|_| None).collect();
        let mut problem = None;
        for msg in port.inbox.try_iter() {
            port.report.received += 1;
            let src = msg.source();
            if msg.phase() != phase {
                problem.get_or_insert(format!("worker {} got a {:?} message during {phase:?}", port.id, msg.phase()));
            } else if src >= self.g || slots[src].is_some() {
                problem.get_or_insert(format!("worker {} got a duplicate {phase:?} message from {src}", port.id));
            } else {
                slots[src] = Some(msg);
            }
        }
        if let Some(missing) = slots.iter().position(Option::is_none) {
            problem.get_or_insert(format!("worker {} is missing the {phase:?} message from {missing}", port.id));
        }
        if let Some(p) = problem {
            self.failure.lock().expect("failure slot").get_or_insert(Error::Protocol(p));
        }
        self.barrier.wait();
        if let Some(e) = self.failure.lock().expect("failure slot").as_ref() {
            return Err(Error::Protocol(e.to_string()));
        }
        Ok(slots.into_iter().map(|m| m.expect("checked above")).collect())
    }

    fn fail(&self, e: Error) {
        self.failure.lock().expect("failure slot").get_or_insert(e);
    }
}

fn merged_report(g: usize, reports: Vec<ShardReport>) -> ShardReport {
    let mut total = ShardReport {
        group_size: g,
        peak_rows: vec![0; g],
        full_rows: vec![0; g],
        ..ShardReport::default()
    };
    for r in reports {
        total.absorb(&r);
    }
    total
}

/// Runs the three-phase lookup; `batches[w]` is worker `w`'s batch.
pub fn sharded_bag<T: Scalar>(group: &MemoryGroup<T>, batches: &[BagBatch<T>]) -> Result<ShardedForward<T>> {
    let g = group.group_size();
    if batches.len() != g {
        return Err(Error::config(format!("{} batches for a group of {g}", batches.len())));
    }
    let bag_size = batches[0].bag_size;
    for b in batches {
        if b.bag_size != bag_size {
            return Err(Error::config("all workers must use the same bag size"));
        }
        b.validate(group.num_rows())?;
    }
    let bags: Vec<usize> = batches.iter().map(BagBatch::len).collect();
    let offsets: Vec<usize> = bags
        .iter()
        .scan(0, |acc, &b| {
            let o = *acc;
            *acc += b;
            Some(o)
        })
        .collect();
    let (wiring, ports) = Wiring::new(g, group.fault);
    let results: Vec<Result<(Tensor<T>, BagBatch<T>, ShardReport)>> = std::thread::scope(|s| {
        let handles: Vec<_> = ports
            .into_iter()
            .map(|mut port| {
                let wiring = &wiring;
                let (bags, offsets) = (&bags, &offsets);
                s.spawn(move || {
                    let own = &batches[port.id];
                    let out = forward_worker(wiring, &mut port, group, own, bags, offsets);
                    if let Err(e) = &out {
                        wiring.fail(Error::Protocol(e.to_string()));
                    }
                    out.map(|(o, b)| (o, b, port.report))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut outputs = Vec::with_capacity(g);
    let mut reports = Vec::with_capacity(g);
    let mut gathered = None;
    for r in results {
        let (out, batch, report) = r?;
        outputs.push(out);
        reports.push(report);
        gathered.get_or_insert(batch);
    }
    Ok(ShardedForward {
        outputs,
        report: merged_report(g, reports),
        gathered: gathered.expect("group is non-empty"),
        bags,
    })
}

fn forward_worker<T: Scalar>(
    wiring: &Wiring<T>,
    port: &mut Port<T>,
    group: &MemoryGroup<T>,
    own: &BagBatch<T>,
    bags: &[usize],
    offsets: &[usize],
) -> Result<(Tensor<T>, BagBatch<T>)> {
    let g = wiring.g;
    let me = port.id;
    for to in 0..g {
        let msg = ShardMessage::IndexGather {
            source: me,
            indices: own.indices.clone(),
            weights: own.weights.clone(),
            bag_size: own.bag_size,
        };
        wiring.send(port, to, msg)?;
    }
    let mut all = BagBatch::empty(own.bag_size);
    for msg in wiring.collect(port, Phase::Gather)? {
        if let ShardMessage::IndexGather {
            indices,
            weights,
            bag_size,
            ..
        } = msg
        {
            all.extend(&BagBatch::new(indices, weights, bag_size)?)?;
        }
    }

    // phase 2: lookup of every gathered bag on this worker's column slice
    let partial = bag_forward(&group.shards[me], &all, 1)?;
    let w = partial.cols();
    port.report.peak_rows[me] = port.report.peak_rows[me].max(partial.rows());

    for to in 0..g {
        let rows = bags[to];
        let data = partial.data()[offsets[to] * w..(offsets[to] + rows) * w].to_vec();
        let msg = ShardMessage::PartialEmbedding {
            source: me,
            dest: to,
            rows,
            data,
        };
        wiring.send(port, to, msg)?;
    }
    let mut out = vec![T::zero(); bags[me] * group.dim];
    port.report.full_rows[me] = bags[me];
    for msg in wiring.collect(port, Phase::Exchange)? {
        if let ShardMessage::PartialEmbedding {
            source, dest, rows, data, ..
        } = msg
        {
            if dest != me || rows != bags[me] || data.len() != rows * w {
                return Err(Error::Protocol(format!(
                    "worker {me} got a malformed partial embedding from {source}"
                )));
            }
            let cols = group.range(source);
            for r in 0..rows {
                out[r * group.dim + cols.start..r * group.dim + cols.end].copy_from_slice(&data[r * w..(r + 1) * w]);
            }
        }
    }
    Ok((Tensor::from_parts(vec![bags[me], group.dim], out), all))
}

/// Routes output gradients back to the shards; returns each shard's value-gradient slice.
pub fn sharded_backward<T: Scalar>(
    group: &MemoryGroup<T>,
    forward: &ShardedForward<T>,
    grad_outs: &[Tensor<T>],
    strategy: Strategy,
) -> Result<ShardedBackward<T>> {
    let g = group.group_size();
    if grad_outs.len() != g {
        return Err(Error::config(format!("{} gradients for a group of {g}", grad_outs.len())));
    }
    for (w, go) in grad_outs.iter().enumerate() {
        if go.len() != forward.bags[w] * group.dim {
            return Err(Error::dim(format!(
                "worker {w} gradient has {} values, expected {}",
                go.len(),
                forward.bags[w] * group.dim
            )));
        }
    }
    let (wiring, ports) = Wiring::new(g, group.fault);
    let results: Vec<Result<(SparseGrad<T>, ShardReport)>> = std::thread::scope(|s| {
        let handles: Vec<_> = ports
            .into_iter()
            .map(|mut port| {
                let wiring = &wiring;
                s.spawn(move || {
                    let own = &grad_outs[port.id];
                    let out = backward_worker(wiring, &mut port, group, forward, own, strategy);
                    if let Err(e) = &out {
                        wiring.fail(Error::Protocol(e.to_string()));
                    }
                    out.map(|gr| (gr, port.report))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut grads = Vec::with_capacity(g);
    let mut reports = Vec::with_capacity(g);
    for r in results {
        let (gr, rep) = r?;
        grads.push(gr);
        reports.push(rep);
    }
    Ok(ShardedBackward {
        grads,
        report: merged_report(g, reports),
    })
}

fn backward_worker<T: Scalar>(
    wiring: &Wiring<T>,
    port: &mut Port<T>,
    group: &MemoryGroup<T>,
    forward: &ShardedForward<T>,
    grad_out: &Tensor<T>,
    strategy: Strategy,
) -> Result<SparseGrad<T>> {
    let me = port.id;
    let rows = forward.bags[me];
    for to in 0..wiring.g {
        let cols = group.range(to);
        let mut data = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            data.extend_from_slice(&grad_out.data()[r * group.dim + cols.start..r * group.dim + cols.end]);
        }
        if data.iter().all(|v| v.is_zero()) {
            data.clear();
        }
        let msg = ShardMessage::GradSlice {
            source: me,
            dest: to,
            rows,
            data,
        };
        wiring.send(port, to, msg)?;
    }
    let w = group.range(me).len();
    let total: usize = forward.bags.iter().sum();
    let mut slice = vec![T::zero(); total * w];
    let mut at = 0;
    for msg in wiring.collect(port, Phase::GradRoute)? {
        if let ShardMessage::GradSlice {
            source, dest, rows, data, ..
        } = msg
        {
            if dest != me || rows != forward.bags[source] || !(data.is_empty() || data.len() == rows * w) {
                return Err(Error::Protocol(format!("worker {me} got a malformed gradient slice from {source}")));
            }
            if !data.is_empty() {
                slice[at * w..(at + rows) * w].copy_from_slice(&data);
            }
            at += rows;
        }
    }
    port.report.peak_rows[me] = total;
    let slice = Tensor::from_parts(vec![total, w], slice);
    bag_backward(strategy, &slice, &forward.gathered, 1)
}

/// Runs a forward pass and checks that no worker held full-width rows for a peer.
pub fn activation_accounting<T: Scalar>(group: &MemoryGroup<T>, batches: &[BagBatch<T>]) -> Result<ShardReport> {
    let fwd = sharded_bag(group, batches)?;
    let total: usize = batches.iter().map(BagBatch::len).sum();
    for (w, b) in batches.iter().enumerate() {
        if fwd.report.full_rows[w] > b.len() {
            return Err(Error::Consistency(format!(
                "worker {w} materialised {} full rows for {} own bags",
                fwd.report.full_rows[w],
                b.len()
            )));
        }
        if fwd.report.peak_rows[w] > total {
            return Err(Error::Consistency(format!(
                "worker {w} held {} slice rows for {total} group rows",
                fwd.report.peak_rows[w]
            )));
        }
    }
    Ok(fwd.report)
}
