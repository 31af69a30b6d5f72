//! Leader-side jobs: client operations, recovery sweeps and copy reads.

use bytes::Bytes;

use super::{ChaosPoint, Node, NodeMode, Output, Purpose, Work};
use crate::bucket::Bucket;
use crate::hash::hash_key;
use crate::kv::{self, KvRequest, KvResponse};
use crate::message::{CopyOutcome, Endpoint, MsgId, Payload};
use crate::time::SimTime;
use crate::types::{BucketVersion, ClientId, ElectId};

pub(super) type JobId = u64;

#[derive(Clone, Debug)]
pub(super) enum Origin {
    Client { client: ClientId, msg: MsgId },
    Sweep,
    Copy { to: Endpoint, msg: MsgId },
}

#[derive(Clone, Debug)]
pub(super) enum JobKind {
    Kv(KvRequest),
    Recover,
    ServeCopy,
    /// Walks the buckets in batches of `batch`; `next` is the first bucket
    /// of the batch after the current one.
    Iterate { next: u32, total: u32, batch: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) enum Resume {
    AfterRecovery,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) enum Stage {
    Queued,
    Recovering(MsgId),
    Fetching(u64),
    Paused(u64, Resume),
    Writing(MsgId),
    Checking(MsgId),
    Validating(MsgId),
}

#[derive(Clone, Debug)]
pub(super) struct Job {
    origin: Origin,
    kind: JobKind,
    stage: Stage,
    /// Buckets of the current batch, in processing order.
    locks: Vec<u32>,
    held: usize,
    cursor: usize,
    elect: Option<ElectId>,
    candidate: Option<Bucket>,
    dirty: bool,
    write_started: bool,
    cancelled: bool,
    /// The client already got its answer; finish without replying.
    suppressed: bool,
    response: Option<KvResponse>,
    keys: Vec<Bytes>,
}

impl Job {
    fn new(origin: Origin, kind: JobKind, locks: Vec<u32>) -> Self {
        Job {
            origin,
            kind,
            stage: Stage::Queued,
            locks,
            held: 0,
            cursor: 0,
            elect: None,
            candidate: None,
            dirty: false,
            write_started: false,
            cancelled: false,
            suppressed: false,
            response: None,
            keys: Vec::new(),
        }
    }

    pub(super) fn client(
        client: ClientId,
        msg: MsgId,
        request: KvRequest,
        num_buckets: u32,
        batch: u32,
    ) -> Self {
        let origin = Origin::Client { client, msg };
        match request.key() {
            Some(key) => {
                let index = hash_key(key, num_buckets);
                Job::new(origin, JobKind::Kv(request), vec![index])
            }
            None => {
                let first = batch.min(num_buckets);
                Job::new(
                    origin,
                    JobKind::Iterate {
                        next: first,
                        total: num_buckets,
                        batch,
                    },
                    (0..first).collect(),
                )
            }
        }
    }

    pub(super) fn serve_copy(to: Endpoint, msg: MsgId, index: u32) -> Self {
        Job::new(Origin::Copy { to, msg }, JobKind::ServeCopy, vec![index])
    }

    pub(super) fn recover(index: u32) -> Self {
        Job::new(Origin::Sweep, JobKind::Recover, vec![index])
    }

    fn is_mutation(&self) -> bool {
        matches!(&self.kind, JobKind::Kv(r) if r.is_mutation())
    }

    fn current_bucket(&self) -> u32 {
        self.locks[self.cursor]
    }
}

impl Node {
    pub(super) fn submit_job(&mut self, job: Job) {
        self.next_job += 1;
        let id = self.next_job;
        self.jobs.insert(id, job);
        self.enqueue_locks(id);
    }

    /// Queues the job on every lock of its batch at once. Lock queues are
    /// FIFO, so the oldest waiting job always gets all of its locks and
    /// multi-bucket jobs cannot deadlock.
    fn enqueue_locks(&mut self, id: JobId) {
        let job = self.jobs.get_mut(&id).unwrap();
        job.held = 0;
        job.cursor = 0;
        job.stage = Stage::Queued;
        for &index in &job.locks {
            let lock = &mut self.locks[index as usize];
            if lock.holder.is_none() && lock.waiters.is_empty() {
                lock.holder = Some(id);
                job.held += 1;
            } else {
                lock.waiters.push_back(id);
            }
        }
        if job.held == job.locks.len() {
            self.work.push_back(Work::Run(id));
        }
    }

    fn release_locks(&mut self, id: JobId, locks: &[u32]) {
        for &index in locks {
            let lock = &mut self.locks[index as usize];
            debug_assert_eq!(lock.holder, Some(id));
            lock.holder = lock.waiters.pop_front();
            if let Some(next) = lock.holder {
                let job = self.jobs.get_mut(&next).unwrap();
                job.held += 1;
                if job.held == job.locks.len() {
                    self.work.push_back(Work::Run(next));
                }
            }
        }
    }

    fn still_leading(&self, elect: Option<ElectId>) -> bool {
        self.is_leader && elect == Some(self.elect_id)
    }

    /// Prepares the job's current bucket: use the local copy when it was
    /// already written in this election, recover it otherwise.
    pub(super) fn begin_bucket(&mut self, now: SimTime, id: JobId) {
        let Some(job) = self.jobs.get_mut(&id) else {
            return;
        };
        if job.cancelled && !job.write_started {
            self.drop_job(id);
            return;
        }
        let elect = *job.elect.get_or_insert(self.elect_id);
        if !(self.is_leader && elect == self.elect_id) {
            self.fail_job(id);
            return;
        }
        let index = job.current_bucket();
        let local = &self.local[index as usize];
        if local.ver.elect_id == elect {
            job.candidate = Some(local.clone());
            job.dirty = false;
            self.after_prepare(now, id);
        } else {
            self.stats.recovery_reads += 1;
            let msg = self.open_round(
                Purpose::Job(id),
                Payload::ReplicaRead {
                    index,
                    elect_id: elect,
                    with_data: true,
                },
            );
            self.jobs.get_mut(&id).unwrap().stage = Stage::Recovering(msg);
        }
    }

    pub(super) fn on_job_round(
        &mut self,
        now: SimTime,
        id: JobId,
        msg: MsgId,
        ok: bool,
        buckets: Vec<Bucket>,
    ) {
        let Some(job) = self.jobs.get(&id) else {
            return;
        };
        let stage = job.stage;
        let matches = match stage {
            Stage::Recovering(m) | Stage::Writing(m) | Stage::Checking(m) | Stage::Validating(m) => {
                m == msg
            }
            _ => false,
        };
        if !matches {
            return;
        }
        if !ok {
            if job.elect == Some(self.elect_id) {
                self.is_leader = false;
            }
            self.fail_job(id);
            return;
        }
        match stage {
            Stage::Recovering(_) => self.on_recovered(now, id, buckets),
            Stage::Writing(_) | Stage::Checking(_) => self.bucket_done(now, id),
            Stage::Validating(_) => self.on_batch_validated(now, id),
            _ => unreachable!(),
        }
    }

    fn on_recovered(&mut self, now: SimTime, id: JobId, buckets: Vec<Bucket>) {
        let job = self.jobs.get_mut(&id).unwrap();
        let elect = job.elect.unwrap();
        let mut best: Option<Bucket> = None;
        for b in buckets {
            if best.as_ref().is_none_or(|x| b.ver > x.ver) {
                best = Some(b);
            }
        }
        let mut best = best.expect("a successful read carries a majority of buckets");
        best.ver = BucketVersion::new(elect.0, 0);
        job.dirty = !self.config.skip_recovery_writeback;
        job.candidate = Some(best);
        if self.config.chaos_points {
            self.pause(id, Resume::AfterRecovery, ChaosPoint::BeforeRecoveryWriteBack);
        } else {
            self.after_prepare(now, id);
        }
    }

    fn pause(&mut self, id: JobId, resume: Resume, point: ChaosPoint) {
        self.next_chaos += 1;
        let token = self.next_chaos;
        self.chaos_waiting.insert(token, id);
        self.jobs.get_mut(&id).unwrap().stage = Stage::Paused(token, resume);
        self.outbox.push(Output::ChaosPoint { point, token });
    }

    pub(super) fn resume_chaos_inner(&mut self, now: SimTime, token: u64) {
        let Some(id) = self.chaos_waiting.remove(&token) else {
            return;
        };
        let Some(job) = self.jobs.get(&id) else {
            return;
        };
        match job.stage {
            Stage::Paused(t, Resume::AfterRecovery) if t == token => self.after_prepare(now, id),
            Stage::Paused(t, Resume::Write) if t == token => self.issue_write(id),
            _ => {}
        }
    }

    /// Copies the bucket from the previous instance if it has not been yet,
    /// then applies the operation.
    fn after_prepare(&mut self, now: SimTime, id: JobId) {
        let job = self.jobs.get_mut(&id).unwrap();
        let index = job.current_bucket();
        let cand = job.candidate.as_mut().unwrap();
        if cand.needs_copy {
            if matches!(self.mode, NodeMode::Reconfig { .. }) {
                job.stage = Stage::Fetching(0);
                let fetch = self.start_fetch(now, id, index);
                if let Some(job) = self.jobs.get_mut(&id) {
                    if job.stage == Stage::Fetching(0) {
                        job.stage = Stage::Fetching(fetch);
                    }
                }
                return;
            }
            cand.needs_copy = false;
            job.dirty = true;
        }
        self.apply_op(id);
    }

    pub(super) fn on_fetch_done(&mut self, _now: SimTime, id: JobId, fetch: u64, bucket: Bucket) {
        let Some(job) = self.jobs.get_mut(&id) else {
            return;
        };
        if job.stage != Stage::Fetching(fetch) {
            return;
        }
        let cand = job.candidate.as_mut().unwrap();
        cand.entries = bucket.entries;
        cand.needs_copy = false;
        job.dirty = true;
        self.stats.copies += 1;
        if !self.still_leading(self.jobs[&id].elect) {
            self.fail_job(id);
            return;
        }
        self.apply_op(id);
    }

    fn apply_op(&mut self, id: JobId) {
        let job = self.jobs.get_mut(&id).unwrap();
        let cand = job.candidate.as_mut().unwrap();
        let needs_check = match &job.kind {
            JobKind::Kv(request) => {
                let (response, mutated) = kv::apply(cand, request);
                job.response = Some(response);
                job.dirty |= mutated;
                true
            }
            JobKind::ServeCopy => true,
            JobKind::Recover | JobKind::Iterate { .. } => false,
        };
        if job.dirty {
            if self.config.chaos_points {
                self.pause(id, Resume::Write, ChaosPoint::BeforeWrite);
            } else {
                self.issue_write(id);
            }
        } else if needs_check {
            let index = job.current_bucket();
            let elect_id = job.elect.unwrap();
            self.stats.checks += 1;
            let msg = self.open_round(
                Purpose::Job(id),
                Payload::ReplicaRead {
                    index,
                    elect_id,
                    with_data: false,
                },
            );
            self.jobs.get_mut(&id).unwrap().stage = Stage::Checking(msg);
        } else {
            self.bucket_done_now(id);
        }
    }

    fn issue_write(&mut self, id: JobId) {
        let job = self.jobs.get_mut(&id).unwrap();
        if job.cancelled && !job.write_started {
            self.drop_job(id);
            return;
        }
        if !(self.is_leader && job.elect == Some(self.elect_id)) {
            self.fail_job(id);
            return;
        }
        let elect = job.elect.unwrap();
        let cand = job.candidate.as_mut().unwrap();
        cand.ver = BucketVersion::new(elect.0, cand.ver.counter + 1);
        let bucket = cand.clone();
        if !job.write_started
            && matches!(job.origin, Origin::Client { .. })
            && matches!(self.mode, NodeMode::Draining { .. })
        {
            self.stats.client_work_while_draining += 1;
        }
        job.write_started = true;
        self.stats.writes += 1;
        let msg = self.open_round(Purpose::Job(id), Payload::ReplicaWrite { bucket });
        self.jobs.get_mut(&id).unwrap().stage = Stage::Writing(msg);
    }

    fn bucket_done(&mut self, _now: SimTime, id: JobId) {
        self.bucket_done_now(id);
    }

    fn bucket_done_now(&mut self, id: JobId) {
        let job = self.jobs.get_mut(&id).unwrap();
        if !matches!(job.kind, JobKind::Iterate { .. }) {
            self.finish(id);
            return;
        }
        job.cursor += 1;
        if job.cursor < job.locks.len() {
            // The next bucket is prepared from the work queue so that long
            // batches do not recurse.
            job.stage = Stage::Queued;
            self.work.push_back(Work::Run(id));
            return;
        }
        let elect_id = job.elect.unwrap();
        let first = job.locks[0];
        let count = job.locks.len() as u32;
        self.stats.batch_checks += 1;
        let msg = self.open_round(
            Purpose::Job(id),
            Payload::ReplicaValidate {
                elect_id,
                first,
                count,
            },
        );
        self.jobs.get_mut(&id).unwrap().stage = Stage::Validating(msg);
    }

    fn on_batch_validated(&mut self, _now: SimTime, id: JobId) {
        let job = self.jobs.get_mut(&id).unwrap();
        for &index in &job.locks {
            job.keys
                .extend(self.local[index as usize].decode_keys().cloned());
        }
        let JobKind::Iterate { next, total, batch } = job.kind else {
            unreachable!();
        };
        if next >= total {
            self.finish(id);
            return;
        }
        let end = next.saturating_add(batch).min(total);
        job.kind = JobKind::Iterate {
            next: end,
            total,
            batch,
        };
        let old = std::mem::replace(&mut job.locks, (next..end).collect());
        self.release_locks(id, &old);
        self.enqueue_locks(id);
    }

    /// Completes the job successfully and answers whoever asked.
    fn finish(&mut self, id: JobId) {
        let mut job = self.jobs.remove(&id).unwrap();
        self.release_locks(id, &job.locks);
        match job.origin {
            Origin::Client { client, msg } => {
                let response = match job.kind {
                    JobKind::Iterate { .. } => {
                        job.keys.sort();
                        KvResponse::Keys(job.keys)
                    }
                    _ => job.response.take().expect("kv job without response"),
                };
                self.answer_client(client, msg, response, job.suppressed);
            }
            Origin::Copy { to, msg } => {
                let bucket = job.candidate.take().unwrap();
                self.send(msg, to, Payload::CopyReply(CopyOutcome::Bucket(bucket)));
            }
            Origin::Sweep => {}
        }
        self.check_copy_complete();
    }

    /// Aborts the job because this node is not (or no longer) the leader.
    fn fail_job(&mut self, id: JobId) {
        let job = self.jobs.remove(&id).unwrap();
        if job.held == job.locks.len() {
            self.release_locks(id, &job.locks);
        }
        let hint = self.hint();
        match job.origin {
            Origin::Client { client, msg } => {
                let maybe_applied = job.write_started && job.is_mutation();
                let response = KvResponse::NotALeader {
                    hint,
                    maybe_applied,
                };
                self.answer_client(client, msg, response, job.suppressed);
            }
            Origin::Copy { to, msg } => {
                self.send(msg, to, Payload::CopyReply(CopyOutcome::NotALeader { hint }));
            }
            Origin::Sweep => {}
        }
    }

    /// Drops a cancelled job that never wrote anything. Its client was
    /// already answered.
    fn drop_job(&mut self, id: JobId) {
        let job = self.jobs.remove(&id).unwrap();
        self.release_locks(id, &job.locks);
    }

    fn answer_client(&mut self, client: ClientId, msg: MsgId, response: KvResponse, suppressed: bool) {
        if let Some(slot) = self.clients.get_mut(&client) {
            if slot.msg == msg {
                slot.response = Some(response.clone());
            }
        }
        if !suppressed {
            self.reply_client(client, msg, response);
        }
    }

    /// On entering drain mode every client job is answered with a redirect.
    /// Jobs that have not written yet are cancelled; jobs that have run to
    /// completion silently, and their client learns the outcome is unknown.
    pub(super) fn cancel_client_jobs(&mut self, _now: SimTime) {
        let NodeMode::Draining { successor } = &self.mode else {
            return;
        };
        let successor = successor.clone();
        let mut replies = Vec::new();
        for job in self.jobs.values_mut() {
            let Origin::Client { client, msg } = job.origin else {
                continue;
            };
            if job.suppressed {
                continue;
            }
            let maybe_applied = job.write_started && job.is_mutation();
            if !job.write_started {
                job.cancelled = true;
            }
            job.suppressed = true;
            replies.push((client, msg, maybe_applied));
        }
        for (client, msg, maybe_applied) in replies {
            let response = KvResponse::ReconfigRedirect {
                successor: Some(successor.clone()),
                maybe_applied,
            };
            if let Some(slot) = self.clients.get_mut(&client) {
                if slot.msg == msg {
                    slot.response = Some(response.clone());
                }
            }
            self.stats.redirects += 1;
            self.reply_client(client, msg, response);
        }
    }
}
