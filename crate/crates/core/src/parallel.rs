//! Layer-block parallel relaxation.
//!
//! Layers are cut into blocks of `c` consecutive layers, each headed by a
//! C-layer. Blocks are grouped into contiguous partitions, one per worker.
//! F-relaxation touches only the interior of each block, so partitions run
//! it independently. C-relaxation reads the last F-layer of the preceding
//! block; when that block lives on another partition the value travels as a
//! [`BoundaryMessage`], exactly one per crossing edge per sweep.
//!
//! Each sweep is bracketed by a full barrier and every layer is computed by
//! the same arithmetic no matter which worker owns it, so results are
//! bitwise independent of the worker count.

use std::io::{Read, Write};
use std::ops::Range;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::resnet::{propagate_slice, Propagator, SourceArray, StateArray};

/// Contiguous layer blocks and their assignment to workers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPartition {
    num_layers: usize,
    block_size: usize,
    num_workers: usize,
    /// Half-open block-index range owned by each worker.
    worker_blocks: Vec<Range<usize>>,
}

impl BlockPartition {
    /// `num_layers / block_size` blocks, dealt to workers in contiguous runs;
    /// the first `blocks % workers` workers receive one extra block and
    /// surplus workers stay idle.
    pub fn new(num_layers: usize, block_size: usize, num_workers: usize) -> Result<Self> {
        if block_size == 0 || num_layers == 0 || !num_layers.is_multiple_of(block_size) {
            return Err(Error::Config(format!(
                "{num_layers} layers cannot be split into blocks of {block_size}"
            )));
        }
        if num_workers == 0 {
            return Err(Error::Config("at least one worker is required".into()));
        }
        let blocks = num_layers / block_size;
        let (base, extra) = (blocks / num_workers, blocks % num_workers);
        let mut start = 0;
        let worker_blocks = (0..num_workers)
            .map(|w| {
                let len = base + usize::from(w < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect();
        Ok(Self {
            num_layers,
            block_size,
            num_workers,
            worker_blocks,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.num_layers / self.block_size
    }

    pub fn num_workers(&self) -> usize {
        self.num_workers
    }

    /// Layer interval of block `b`; its C-layer is `range.start`.
    pub fn block_range(&self, b: usize) -> Range<usize> {
        b * self.block_size..(b + 1) * self.block_size
    }

    pub fn block_ranges(&self) -> impl DoubleEndedIterator<Item = Range<usize>> + ExactSizeIterator + '_ {
        (0..self.num_blocks()).map(|b| self.block_range(b))
    }

    pub fn worker_blocks(&self, worker: usize) -> Range<usize> {
        self.worker_blocks[worker].clone()
    }

    pub fn worker_layers(&self, worker: usize) -> Range<usize> {
        let b = &self.worker_blocks[worker];
        b.start * self.block_size..b.end * self.block_size
    }

    pub fn worker_of(&self, block: usize) -> usize {
        self.worker_blocks
            .iter()
            .position(|r| r.contains(&block))
            .expect("block index out of range")
    }

    /// Block edges `(b − 1, b)` whose endpoints live on different workers.
    pub fn cross_edges(&self) -> Vec<(usize, usize)> {
        (1..self.num_blocks())
            .filter(|&b| self.worker_of(b - 1) != self.worker_of(b))
            .map(|b| (b - 1, b))
            .collect()
    }
}

/// Builds a partition of `num_layers` layers into blocks of `c`.
pub fn make_partition(num_layers: usize, c: usize, num_workers: usize) -> Result<BlockPartition> {
    BlockPartition::new(num_layers, c, num_workers)
}

/// State of a block's last F-layer sent across a partition edge.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMessage {
    pub tag: u64,
    pub sender_block: u32,
    pub state: Vec<f64>,
}

const HEADER_LEN: usize = 16;

impl BoundaryMessage {
    /// `[u64 tag][u32 sender][u32 len][len × f64]`, all little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.state.len());
        out.extend_from_slice(&self.tag.to_le_bytes());
        out.extend_from_slice(&self.sender_block.to_le_bytes());
        out.extend_from_slice(&(self.state.len() as u32).to_le_bytes());
        for v in &self.state {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes one message from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Parse {
                offset: bytes.len() as u64,
                msg: "truncated boundary message header".into(),
            });
        }
        let tag = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let sender_block = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let total = HEADER_LEN + 8 * len;
        if bytes.len() < total {
            return Err(Error::Parse {
                offset: bytes.len() as u64,
                msg: format!("boundary message payload truncated, need {total} bytes"),
            });
        }
        let state = bytes[HEADER_LEN..total]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((
            Self {
                tag,
                sender_block,
                state,
            },
            total,
        ))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)?;
        let len = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let mut buf = header.to_vec();
        buf.resize(HEADER_LEN + 8 * len, 0);
        r.read_exact(&mut buf[HEADER_LEN..])?;
        Ok(Self::decode(&buf)?.0)
    }
}

/// How boundary messages move between partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Transport {
    /// Messages handed over as values.
    #[default]
    InProcess,
    /// Messages serialised to the byte wire format and decoded on receipt.
    Wire,
}

enum Packet {
    Value(BoundaryMessage),
    Bytes(Vec<u8>),
}

impl Packet {
    fn open(self) -> Result<BoundaryMessage> {
        match self {
            Packet::Value(m) => Ok(m),
            Packet::Bytes(b) => {
                let (m, used) = BoundaryMessage::decode(&b)?;
                if used != b.len() {
                    return Err(Error::Protocol(format!(
                        "{} trailing bytes after boundary message",
                        b.len() - used
                    )));
                }
                Ok(m)
            }
        }
    }
}

/// Checks that a worker's inbox for one sweep holds exactly the message it
/// expects: one message from `expected_sender` tagged `tag`, or nothing
/// when `expected_sender` is `None`.
pub fn validate_inbox(
    inbox: Vec<BoundaryMessage>,
    expected_sender: Option<usize>,
    tag: u64,
    width: usize,
) -> Result<Option<BoundaryMessage>> {
    let mut inbox = inbox.into_iter();
    let first = inbox.next();
    if inbox.next().is_some() {
        return Err(Error::Protocol(format!(
            "more than one boundary message received in sweep {tag}"
        )));
    }
    match (expected_sender, first) {
        (None, None) => Ok(None),
        (None, Some(m)) => Err(Error::Protocol(format!(
            "unexpected boundary message from block {} in sweep {tag}",
            m.sender_block
        ))),
        (Some(s), None) => Err(Error::Protocol(format!(
            "missing boundary message from block {s} in sweep {tag}"
        ))),
        (Some(s), Some(m)) => {
            if m.sender_block as usize != s {
                return Err(Error::Protocol(format!(
                    "boundary message from block {}, expected block {s}",
                    m.sender_block
                )));
            }
            if m.tag != tag {
                return Err(Error::Protocol(format!(
                    "boundary message tagged {}, current sweep is {tag}",
                    m.tag
                )));
            }
            if m.state.len() != width {
                return Err(Error::Protocol(format!(
                    "boundary state of width {}, expected {width}",
                    m.state.len()
                )));
            }
            Ok(Some(m))
        }
    }
}

#[cfg(test)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Fault {
    DropMessage,
    DuplicateMessage,
}

/// Runs relaxation sweeps over a [`BlockPartition`] on a fixed worker pool.
pub struct LayerExecutor {
    workers: usize,
    pool: Option<rayon::ThreadPool>,
    transport: Transport,
    sweep_tag: AtomicU64,
    messages_total: AtomicU64,
    #[cfg(test)]
    fault: Option<Fault>,
}

impl std::fmt::Debug for LayerExecutor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LayerExecutor")
            .field("workers", &self.workers)
            .field("transport", &self.transport)
            .finish()
    }
}

impl LayerExecutor {
    /// Executor with `workers` threads. One worker runs everything on the
    /// calling thread.
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("at least one worker is required".into()));
        }
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .thread_name(|i| format!("layer-block-{i}"))
                    .build()
                    .map_err(|e| Error::Execution(format!("cannot start worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            workers,
            pool,
            transport: Transport::default(),
            sweep_tag: AtomicU64::new(0),
            messages_total: AtomicU64::new(0),
            #[cfg(test)]
            fault: None,
        })
    }

    pub fn serial() -> Self {
        Self::new(1).expect("one worker is always valid")
    }

    pub fn with_transport(mut self, transport: Transport) -> Self {
        self.transport = transport;
        self
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Partition of a level of `num_layers` layers matching this executor.
    pub fn partition(&self, num_layers: usize, c: usize) -> Result<BlockPartition> {
        BlockPartition::new(num_layers, c, self.workers)
    }

    /// Boundary messages exchanged since construction.
    pub fn messages_sent(&self) -> u64 {
        self.messages_total.load(Ordering::Relaxed)
    }

    /// Runs `task(worker)` for every worker, on the pool when there is one.
    fn for_each_worker<T, F>(&self, count: usize, task: F) -> std::thread::Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        catch_unwind(AssertUnwindSafe(|| match &self.pool {
            None => (0..count).map(&task).collect(),
            Some(pool) => {
                let slots: Vec<Mutex<Option<T>>> = (0..count).map(|_| Mutex::new(None)).collect();
                pool.scope(|s| {
                    for (w, slot) in slots.iter().enumerate() {
                        let task = &task;
                        s.spawn(move |_| {
                            let out = task(w);
                            *slot.lock().unwrap() = Some(out);
                        });
                    }
                });
                slots
                    .into_iter()
                    .map(|s| s.into_inner().unwrap().expect("worker finished"))
                    .collect()
            }
        }))
    }

    fn check<P: Propagator>(
        level: &P,
        u: &StateArray,
        f: &SourceArray,
        partition: &BlockPartition,
    ) -> Result<()> {
        let (n, q) = (level.num_layers(), level.width());
        u.check_shape("state", n, q)?;
        f.check_shape("source", n, q)?;
        if partition.num_layers() != n {
            return Err(Error::Dimension(format!(
                "partition covers {} layers, level has {n}",
                partition.num_layers()
            )));
        }
        Ok(())
    }

    /// F-relaxation with one task per partition. Each block's interior is
    /// recomputed from its C-layer; C-layers are left untouched. On a worker
    /// panic the states are restored and an execution error returned.
    pub fn parallel_f_relax<P: Propagator + Sync>(
        &self,
        level: &P,
        u: &mut StateArray,
        f: &SourceArray,
        partition: &BlockPartition,
    ) -> Result<()> {
        Self::check(level, u, f, partition)?;
        if partition.block_size() == 1 {
            return Ok(());
        }
        let snapshot = u.clone();
        let q = u.width();
        let c = partition.block_size();
        let chunks = split_by_worker(u.as_mut_slice(), partition, q);
        let outcome = self.for_each_worker(chunks.len(), |w| {
            let (layers, span) = &chunks[w];
            // Each task holds the only handle to its slice.
            let mut span = lock_span(span);
            for (k, block) in span.chunks_exact_mut(c * q).enumerate() {
                propagate_slice(level, block, f, layers.start + k * c);
            }
        });
        match outcome {
            Ok(_) => Ok(()),
            Err(panic) => {
                *u = snapshot;
                Err(Error::Execution(format!(
                    "worker panicked during F-relaxation: {}",
                    panic_message(&panic)
                )))
            }
        }
    }

    /// C-relaxation with boundary exchange. Returns the number of messages
    /// sent, one per partition-crossing block edge.
    pub fn exchange_and_c_relax<P: Propagator + Sync>(
        &self,
        level: &P,
        u: &mut StateArray,
        f: &SourceArray,
        partition: &BlockPartition,
    ) -> Result<usize> {
        Self::check(level, u, f, partition)?;
        let tag = self.sweep_tag.fetch_add(1, Ordering::Relaxed) + 1;
        let q = u.width();
        let c = partition.block_size();
        let workers = partition.num_workers();
        let mailboxes: Vec<Mutex<Vec<Packet>>> = (0..workers).map(|_| Mutex::new(Vec::new())).collect();

        // Send: each partition posts its last F-layer to the next partition.
        let sent = self.for_each_worker(workers, |w| {
            let blocks = partition.worker_blocks(w);
            if blocks.is_empty() || blocks.end == partition.num_blocks() {
                return 0usize;
            }
            let sender = blocks.end - 1;
            let msg = BoundaryMessage {
                tag,
                sender_block: sender as u32,
                state: u.layer(blocks.end * c - 1).to_vec(),
            };
            let dest = partition.worker_of(blocks.end);
            let copies = self.copies_to_send();
            let mut inbox = mailboxes[dest].lock().unwrap();
            for _ in 0..copies {
                inbox.push(match self.transport {
                    Transport::InProcess => Packet::Value(msg.clone()),
                    Transport::Wire => Packet::Bytes(msg.encode()),
                });
            }
            copies
        });
        let sent: usize = sent
            .map_err(|p| Error::Execution(format!("worker panicked while sending: {}", panic_message(&p))))?
            .into_iter()
            .sum();
        self.messages_total.fetch_add(sent as u64, Ordering::Relaxed);

        // Receive and validate every inbox before any state is written.
        let snapshot = u.clone();
        let mut halos: Vec<Option<BoundaryMessage>> = Vec::with_capacity(workers);
        for (w, mailbox) in mailboxes.into_iter().enumerate() {
            let blocks = partition.worker_blocks(w);
            let expected = (!blocks.is_empty() && blocks.start > 0).then(|| blocks.start - 1);
            let inbox = mailbox
                .into_inner()
                .unwrap()
                .into_iter()
                .map(Packet::open)
                .collect::<Result<Vec<_>>>()?;
            halos.push(validate_inbox(inbox, expected, tag, q)?);
        }

        let chunks = split_by_worker(u.as_mut_slice(), partition, q);
        let outcome = self.for_each_worker(chunks.len(), |w| {
            let (layers, span) = &chunks[w];
            let mut span = lock_span(span);
            let mut next = vec![0.0; q];
            // Descending order: every C-layer is computed from values as they
            // were before the sweep, even when c = 1.
            for k in (0..layers.len() / c).rev() {
                let global = layers.start + k * c;
                if global == 0 {
                    continue;
                }
                if k == 0 {
                    let halo = halos[w].as_ref().expect("validated halo");
                    level.step(global - 1, &halo.state, &mut next);
                } else {
                    let prev = &span[(k * c - 1) * q..k * c * q];
                    level.step(global - 1, prev, &mut next);
                }
                let dst = &mut span[k * c * q..(k * c + 1) * q];
                for ((d, x), s) in dst.iter_mut().zip(&next).zip(f.layer(global)) {
                    *d = x + s;
                }
            }
        });
        if let Err(p) = outcome {
            *u = snapshot;
            return Err(Error::Execution(format!(
                "worker panicked during C-relaxation: {}",
                panic_message(&p)
            )));
        }
        u.layer_mut(0).copy_from_slice(f.layer(0));
        Ok(sent)
    }

    /// F-, C-, then F-relaxation with a barrier after each sweep.
    pub fn fcf_relax<P: Propagator + Sync>(
        &self,
        level: &P,
        u: &mut StateArray,
        f: &SourceArray,
        partition: &BlockPartition,
    ) -> Result<()> {
        self.parallel_f_relax(level, u, f, partition)?;
        self.exchange_and_c_relax(level, u, f, partition)?;
        self.parallel_f_relax(level, u, f, partition)
    }

    #[cfg(not(test))]
    #[inline]
    fn copies_to_send(&self) -> usize {
        1
    }

    #[cfg(test)]
    fn copies_to_send(&self) -> usize {
        match self.fault {
            None => 1,
            Some(Fault::DropMessage) => 0,
            Some(Fault::DuplicateMessage) => 2,
        }
    }
}

/// Per-worker `(layer range, slice)` pairs covering `data`. Idle workers get
/// an empty range.
fn split_by_worker<'a>(
    data: &'a mut [f64],
    partition: &BlockPartition,
    q: usize,
) -> Vec<(Range<usize>, Mutex<&'a mut [f64]>)> {
    let mut rest = data;
    let mut out = Vec::with_capacity(partition.num_workers());
    for w in 0..partition.num_workers() {
        let layers = partition.worker_layers(w);
        let (head, tail) = std::mem::take(&mut rest).split_at_mut(layers.len() * q);
        rest = tail;
        out.push((layers, Mutex::new(head)));
    }
    out
}

/// Exclusive access to a worker's slice. The lock is uncontended: every
/// slice is touched by exactly one task per sweep.
fn lock_span<'a, 'b>(m: &'b Mutex<&'a mut [f64]>) -> std::sync::MutexGuard<'b, &'a mut [f64]> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".into()
    }
}
