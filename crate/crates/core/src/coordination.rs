//! Workflows: named steps with dependencies, executed in topological order
//! inside one unit of work.
//!
//! Before each step attempt the impairment handler is consulted. Infra
//! failures of a step are retried under the runtime's step policy; anything
//! else aborts the unit of work and is returned to the caller.

use std::collections::HashMap;
use std::future::Future;
use std::sync::Arc;

use futures::future::{join_all, BoxFuture, FutureExt};
use parking_lot::Mutex;

use crate::error::{Error, ErrorRegistry, Result};
use crate::impairment::{ImpairmentAction, ImpairmentHandler};
use crate::messaging::RetryPolicy;
use crate::monitoring::{SpanContext, SpanRecorder};
use crate::transaction::{Compensation, UnitOfWorkService, UowHandle};

/// What a step body receives.
#[derive(Clone)]
pub struct StepContext {
    pub uow: UowHandle,
    /// Span of the running step, for commands that should link to it.
    pub trace: Option<SpanContext>,
    pub attempt: u32,
}

pub type StepFn = Arc<dyn Fn(StepContext) -> BoxFuture<'static, Result<()>> + Send + Sync>;

fn boxed<F, Fut>(f: F) -> StepFn
where
    F: Fn(StepContext) -> Fut + Send + Sync + 'static,
    Fut: Future<Output = Result<()>> + Send + 'static,
{
    Arc::new(move |ctx| f(ctx).boxed())
}

#[derive(Clone)]
pub struct Step {
    pub name: String,
    pub dependencies: Vec<String>,
    body: StepFn,
    compensation: Option<StepFn>,
}

impl std::fmt::Debug for Step {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Step")
            .field("name", &self.name)
            .field("dependencies", &self.dependencies)
            .field("compensable", &self.compensation.is_some())
            .finish()
    }
}

impl Step {
    pub fn new<F, Fut>(name: impl Into<String>, body: F) -> Self
    where
        F: Fn(StepContext) -> Fut + Send + Sync + 'static,
        Fut: Future<Output = Result<()>> + Send + 'static,
    {
        Step { name: name.into(), dependencies: Vec::new(), body: boxed(body), compensation: None }
    }

    pub fn after(mut self, dependencies: &[&str]) -> Self {
        self.dependencies.extend(dependencies.iter().map(|d| d.to_string()));
        self
    }

    /// Registered with the unit of work once the step succeeds. Only saga
    /// units run compensations.
    pub fn with_compensation<F, Fut>(mut self, compensation: F) -> Self
    where
        F: Fn(StepContext) -> Fut + Send + Sync + 'static,
        Fut: Future<Output = Result<()>> + Send + 'static,
    {
        self.compensation = Some(boxed(compensation));
        self
    }
}

fn index_steps(steps: &[Step]) -> Result<(HashMap<&str, usize>, Vec<Vec<usize>>)> {
    if steps.is_empty() {
        return Err(Error::EmptyWorkflow);
    }
    let mut index = HashMap::new();
    for (i, s) in steps.iter().enumerate() {
        if index.insert(s.name.as_str(), i).is_some() {
            return Err(Error::DuplicateStepName(s.name.clone()));
        }
    }
    let mut deps = Vec::with_capacity(steps.len());
    for s in steps {
        let mut d = Vec::new();
        for dep in &s.dependencies {
            let &j = index
                .get(dep.as_str())
                .ok_or_else(|| Error::UnknownDependency { step: s.name.clone(), dependency: dep.clone() })?;
            d.push(j);
        }
        deps.push(d);
    }
    Ok((index, deps))
}

/// Topological order of `steps`; among ready steps, declaration order wins.
pub fn execution_plan(steps: &[Step]) -> Result<Vec<usize>> {
    let (_, deps) = index_steps(steps)?;
    let mut done = vec![false; steps.len()];
    let mut order = Vec::with_capacity(steps.len());
    while order.len() < steps.len() {
        let ready = (0..steps.len()).find(|&i| !done[i] && deps[i].iter().all(|&d| done[d]));
        match ready {
            Some(i) => {
                done[i] = true;
                order.push(i);
            }
            None => {
                let stuck = (0..steps.len()).filter(|&i| !done[i]).map(|i| steps[i].name.clone()).collect();
                return Err(Error::CyclicDependencies(stuck));
            }
        }
    }
    Ok(order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkflowStatus {
    Built,
    Running,
    Paused,
    Committed,
    Aborted,
}

impl WorkflowStatus {
    fn as_str(self) -> &'static str {
        match self {
            WorkflowStatus::Built => "BUILT",
            WorkflowStatus::Running => "RUNNING",
            WorkflowStatus::Paused => "PAUSED",
            WorkflowStatus::Committed => "COMMITTED",
            WorkflowStatus::Aborted => "ABORTED",
        }
    }
}

/// Everything a workflow needs from its environment.
#[derive(Clone)]
pub struct WorkflowRuntime {
    pub uows: Arc<dyn UnitOfWorkService>,
    pub errors: ErrorRegistry,
    pub impairments: Option<Arc<ImpairmentHandler>>,
    pub recorder: Option<Arc<SpanRecorder>>,
    pub step_retry: RetryPolicy,
    /// Run independent steps concurrently in [`Workflow::execute`].
    pub parallel_steps: bool,
}

impl WorkflowRuntime {
    pub fn new(uows: Arc<dyn UnitOfWorkService>, errors: ErrorRegistry) -> Self {
        WorkflowRuntime {
            uows,
            errors,
            impairments: None,
            recorder: None,
            step_retry: RetryPolicy::default(),
            parallel_steps: false,
        }
    }
}

pub struct Workflow {
    functionality: String,
    steps: Vec<Step>,
    deps: Vec<Vec<usize>>,
    order: Vec<usize>,
    executed: Vec<bool>,
    completion: Mutex<Vec<usize>>,
    status: WorkflowStatus,
    uow: UowHandle,
    runtime: WorkflowRuntime,
    root: Option<SpanContext>,
}

impl Workflow {
    /// Validates the step graph and opens the unit of work.
    pub async fn build(runtime: &WorkflowRuntime, functionality: &str, steps: Vec<Step>) -> Result<Workflow> {
        let order = execution_plan(&steps)?;
        let (_, deps) = index_steps(&steps)?;
        let uow = runtime.uows.create_unit_of_work(functionality).await?;
        Ok(Workflow {
            functionality: functionality.to_string(),
            executed: vec![false; steps.len()],
            steps,
            deps,
            order,
            completion: Mutex::new(Vec::new()),
            status: WorkflowStatus::Built,
            uow,
            runtime: runtime.clone(),
            root: None,
        })
    }

    pub fn functionality(&self) -> &str {
        &self.functionality
    }

    pub fn status(&self) -> WorkflowStatus {
        self.status
    }

    pub fn uow(&self) -> &UowHandle {
        &self.uow
    }

    /// Step names in topological execution order.
    pub fn plan(&self) -> Vec<&str> {
        self.order.iter().map(|&i| self.steps[i].name.as_str()).collect()
    }

    /// Names of the steps that finished successfully, in completion order.
    pub fn completed_steps(&self) -> Vec<String> {
        self.completion.lock().iter().map(|&i| self.steps[i].name.clone()).collect()
    }

    fn start(&mut self, action: &'static str) -> Result<()> {
        match self.status {
            WorkflowStatus::Built | WorkflowStatus::Paused => {}
            other => return Err(Error::InvalidWorkflowState { action, status: other.as_str() }),
        }
        self.status = WorkflowStatus::Running;
        if self.root.is_none() {
            self.root = self.runtime.recorder.as_ref().map(|r| r.create_root(&self.functionality));
        }
        Ok(())
    }

    /// Runs every remaining step, then commits. On failure the unit of work
    /// is aborted and the failure returned.
    pub async fn execute(&mut self) -> Result<()> {
        self.start("execute")?;
        let ran = if self.runtime.parallel_steps { self.run_waves().await } else { self.run_sequential(None).await };
        if let Err(e) = ran {
            self.abort().await;
            return Err(e);
        }
        match self.runtime.uows.commit(&self.uow).await {
            Ok(()) => {
                self.finish(WorkflowStatus::Committed);
                Ok(())
            }
            Err(e) => {
                if self.uow.lock().ensure_open().is_ok() {
                    let _ = self.runtime.uows.abort(&self.uow).await;
                }
                self.finish(WorkflowStatus::Aborted);
                Err(e)
            }
        }
    }

    /// Runs remaining steps in plan order up to and including `step`, then
    /// pauses without committing.
    pub async fn execute_until_step(&mut self, step: &str) -> Result<()> {
        let target = self
            .steps
            .iter()
            .position(|s| s.name == step)
            .ok_or_else(|| Error::UnknownStep(step.to_string()))?;
        self.start("execute_until_step")?;
        if let Err(e) = self.run_sequential(Some(target)).await {
            self.abort().await;
            return Err(e);
        }
        self.status = WorkflowStatus::Paused;
        Ok(())
    }

    async fn run_sequential(&mut self, stop_after: Option<usize>) -> Result<()> {
        for pos in 0..self.order.len() {
            let i = self.order[pos];
            if self.executed[i] {
                if Some(i) == stop_after {
                    break;
                }
                continue;
            }
            self.executed[i] = true;
            self.run_step(i).await?;
            if Some(i) == stop_after {
                break;
            }
        }
        Ok(())
    }

    async fn run_waves(&mut self) -> Result<()> {
        loop {
            let wave: Vec<usize> = (0..self.steps.len())
                .filter(|&i| !self.executed[i] && self.deps[i].iter().all(|&d| self.executed[d]))
                .collect();
            if wave.is_empty() {
                return Ok(());
            }
            for &i in &wave {
                self.executed[i] = true;
            }
            let this = &*self;
            let results = join_all(wave.iter().map(|&i| this.run_step(i))).await;
            if let Some(e) = results.into_iter().find_map(|r| r.err()) {
                return Err(e);
            }
        }
    }

    async fn run_step(&self, i: usize) -> Result<()> {
        let step = &self.steps[i];
        let recorder = self.runtime.recorder.as_ref();
        let span = recorder.zip(self.root).map(|(r, root)| r.start_span(root, &step.name));
        let (result, attempts) = self
            .runtime
            .step_retry
            .run(|attempt| {
                let ctx = StepContext { uow: self.uow.clone(), trace: span, attempt };
                async move {
                    self.impair(&step.name).await?;
                    (step.body)(ctx).await
                }
            })
            .await;
        if let (Some(r), Some(s)) = (recorder, span) {
            let _ = r.set_attribute(s.span_id, "attempts", attempts.to_string());
            if let Err(e) = &result {
                let _ = r.set_attribute(s.span_id, "error", e.name());
            }
            let _ = r.end_span(s.span_id);
        }
        result?;
        self.completion.lock().push(i);
        if let Some(comp) = &step.compensation {
            self.runtime.uows.register_compensation(&self.uow, self.compensation_for(&step.name, comp.clone()));
        }
        Ok(())
    }

    async fn impair(&self, step: &str) -> Result<()> {
        let Some(handler) = &self.runtime.impairments else { return Ok(()) };
        match handler.consult(&self.functionality, step) {
            None => Ok(()),
            Some(ImpairmentAction::Delay(ms)) => {
                tokio::time::sleep(std::time::Duration::from_millis(ms)).await;
                Ok(())
            }
            Some(ImpairmentAction::Fail(name)) => {
                Err(self.runtime.errors.reconstruct(&name, &format!("injected into {}.{step}", self.functionality)))
            }
        }
    }

    fn compensation_for(&self, step: &str, action: StepFn) -> Compensation {
        let uow = self.uow.clone();
        let recorder = self.runtime.recorder.clone();
        let root = self.root;
        let name = format!("compensate.{step}");
        let span_name = name.clone();
        Compensation {
            name,
            action: Arc::new(move || {
                let span = recorder.as_ref().zip(root).map(|(r, root)| r.start_span(root, &span_name));
                let fut = action(StepContext { uow: uow.clone(), trace: span, attempt: 1 });
                let recorder = recorder.clone();
                async move {
                    let out = fut.await;
                    if let (Some(r), Some(s)) = (recorder, span) {
                        let _ = r.end_span(s.span_id);
                    }
                    out
                }
                .boxed()
            }),
        }
    }

    async fn abort(&mut self) {
        if self.uow.lock().ensure_open().is_ok() {
            if let Err(e) = self.runtime.uows.abort(&self.uow).await {
                tracing::warn!(functionality = %self.functionality, error = %e, "abort failed");
            }
        }
        self.finish(WorkflowStatus::Aborted);
    }

    fn finish(&mut self, status: WorkflowStatus) {
        self.status = status;
        if let (Some(r), Some(root)) = (&self.runtime.recorder, self.root) {
            let _ = r.set_attribute(root.span_id, "outcome", status.as_str());
            let _ = r.end_span(root.span_id);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::AggregateStore;
    use crate::transaction::{CausalUnitOfWorkService, SagaUnitOfWorkService, UowStatus};
    use crate::versioning::CentralizedVersionService;
    use proptest::prelude::*;

    fn noop(name: &str) -> Step {
        Step::new(name, |_| async { Ok(()) })
    }

    fn saga_runtime() -> WorkflowRuntime {
        let store = Arc::new(AggregateStore::new());
        let svc = SagaUnitOfWorkService::new(store, Arc::new(CentralizedVersionService::default()));
        let mut rt = WorkflowRuntime::new(Arc::new(svc), ErrorRegistry::default());
        rt.recorder = Some(Arc::new(SpanRecorder::new()));
        rt
    }

    fn probe(name: &str, log: &Arc<Mutex<Vec<String>>>) -> Step {
        let (log, log2, n, n2) = (log.clone(), log.clone(), name.to_string(), name.to_string());
        Step::new(name, move |_| {
            let (log, n) = (log.clone(), n.clone());
            async move {
                log.lock().push(n);
                Ok(())
            }
        })
        .with_compensation(move |_| {
            let (log, n) = (log2.clone(), n2.clone());
            async move {
                log.lock().push(format!("undo-{n}"));
                Ok(())
            }
        })
    }

    #[test]
    fn plan_validation() {
        let cyc = vec![noop("a").after(&["b"]), noop("b").after(&["a"])];
        assert!(matches!(execution_plan(&cyc), Err(Error::CyclicDependencies(_))));
        assert!(matches!(execution_plan(&[noop("a"), noop("a")]), Err(Error::DuplicateStepName(_))));
        assert!(matches!(execution_plan(&[noop("a").after(&["z"])]), Err(Error::UnknownDependency { .. })));
        assert_eq!(execution_plan(&[]).unwrap_err(), Error::EmptyWorkflow);
        assert_eq!(execution_plan(&[noop("only")]).unwrap(), vec![0]);
        let two = vec![noop("getUserStep"), noop("addParticipantStep").after(&["getUserStep"])];
        assert_eq!(execution_plan(&two).unwrap(), vec![0, 1]);
    }

    #[test]
    fn ties_follow_declaration_order() {
        let steps = vec![noop("d").after(&["b", "c"]), noop("c").after(&["a"]), noop("b").after(&["a"]), noop("a")];
        assert_eq!(execution_plan(&steps).unwrap(), vec![3, 1, 2, 0]);
    }

    /// All topological orders of a small graph, by brute force over permutations.
    fn all_orders(n: usize, deps: &[Vec<usize>]) -> Vec<Vec<usize>> {
        fn permute(rest: &mut Vec<usize>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if rest.is_empty() {
                out.push(cur.clone());
                return;
            }
            for k in 0..rest.len() {
                let x = rest.remove(k);
                cur.push(x);
                permute(rest, cur, out);
                cur.pop();
                rest.insert(k, x);
            }
        }
        let mut perms = Vec::new();
        permute(&mut (0..n).collect(), &mut Vec::new(), &mut perms);
        perms
            .into_iter()
            .filter(|p| {
                let pos: Vec<usize> = (0..n).map(|i| p.iter().position(|&x| x == i).unwrap()).collect();
                (0..n).all(|i| deps[i].iter().all(|&d| pos[d] < pos[i]))
            })
            .collect()
    }

    proptest! {
        #[test]
        fn plan_is_a_valid_topological_order(edges in proptest::collection::vec((0usize..6, 0usize..6), 0..10)) {
            let n = 6;
            let mut deps = vec![Vec::new(); n];
            for (a, b) in edges {
                if a < b && !deps[b].contains(&a) {
                    deps[b].push(a);
                }
            }
            let names: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
            let steps: Vec<Step> = (0..n)
                .map(|i| {
                    let d: Vec<&str> = deps[i].iter().map(|&j| names[j].as_str()).collect();
                    noop(&names[i]).after(&d)
                })
                .collect();
            let plan = execution_plan(&steps).unwrap();
            prop_assert!(all_orders(n, &deps).contains(&plan));
        }
    }

    #[tokio::test(start_paused = true)]
    async fn diamond_respects_dependencies_in_time() {
        for parallel in [false, true] {
            let mut rt = saga_runtime();
            rt.parallel_steps = parallel;
            let sleepy = |name: &str, ms: u64| {
                Step::new(name, move |_| async move {
                    tokio::time::sleep(std::time::Duration::from_millis(ms)).await;
                    Ok(())
                })
            };
            let steps = vec![
                sleepy("A", 5),
                sleepy("B", 10).after(&["A"]),
                sleepy("C", 3).after(&["A"]),
                sleepy("D", 1).after(&["B", "C"]),
            ];
            let mut wf = Workflow::build(&rt, "diamond", steps).await.unwrap();
            wf.execute().await.unwrap();
            assert_eq!(wf.status(), WorkflowStatus::Committed);
            let spans = rt.recorder.unwrap().finished();
            let get = |n: &str| spans.iter().find(|s| s.name == n).unwrap().clone();
            for (before, after) in [("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")] {
                assert!(get(before).end_ns <= get(after).start_ns, "{before} before {after}");
            }
            if parallel {
                assert_eq!(wf.completed_steps(), vec!["A", "C", "B", "D"]);
            }
        }
    }

    #[tokio::test(start_paused = true)]
    async fn domain_failure_compensates_and_skips_the_rest() {
        let rt = saga_runtime();
        let log = Arc::new(Mutex::new(Vec::new()));
        let steps = vec![
            probe("one", &log),
            Step::new("two", |_| async { Err(Error::domain("Nope", "step two refused")) }).after(&["one"]),
            probe("three", &log).after(&["two"]),
        ];
        let mut wf = Workflow::build(&rt, "f", steps).await.unwrap();
        let err = wf.execute().await.unwrap_err();
        assert_eq!(err.name(), "Nope");
        assert_eq!(*log.lock(), vec!["one", "undo-one"]);
        assert_eq!(wf.status(), WorkflowStatus::Aborted);
        assert_eq!(wf.uow().lock().status, UowStatus::Aborted);
        let names: Vec<_> = rt.recorder.unwrap().finished().into_iter().map(|s| s.name).collect();
        assert!(names.contains(&"compensate.one".to_string()));
        assert!(!names.contains(&"three".to_string()));
    }

    #[tokio::test(start_paused = true)]
    async fn infra_failure_is_retried_with_impairment_counter() {
        let mut rt = saga_runtime();
        let imp = Arc::new(ImpairmentHandler::new());
        imp.set_rules(crate::impairment::parse_plan(
            "functionality,step,invocation_index,action,value\nf,s,1,FAIL,TransientFailure\n",
        )
        .unwrap());
        rt.impairments = Some(imp.clone());
        let runs = Arc::new(Mutex::new(0));
        let r = runs.clone();
        let step = Step::new("s", move |_| {
            let r = r.clone();
            async move {
                *r.lock() += 1;
                Ok(())
            }
        });
        let mut wf = Workflow::build(&rt, "f", vec![step]).await.unwrap();
        wf.execute().await.unwrap();
        assert_eq!(*runs.lock(), 1);
        assert_eq!(imp.invocations("f", "s"), 2);
    }

    #[tokio::test(start_paused = true)]
    async fn injected_delay_shows_in_span() {
        let mut rt = saga_runtime();
        let imp = Arc::new(ImpairmentHandler::new());
        imp.set_rules(crate::impairment::parse_plan("functionality,step,invocation_index,action,value\nf,s,1,DELAY,25\n").unwrap());
        rt.impairments = Some(imp);
        let mut wf = Workflow::build(&rt, "f", vec![noop("s")]).await.unwrap();
        wf.execute().await.unwrap();
        let spans = rt.recorder.unwrap().finished();
        assert!(spans.iter().find(|s| s.name == "s").unwrap().duration_ns() >= 25_000_000);
        assert_eq!(spans.iter().filter(|s| s.parent_span_id.is_none()).count(), 1);
    }

    #[tokio::test(start_paused = true)]
    async fn pause_and_resume() {
        let rt = saga_runtime();
        let log = Arc::new(Mutex::new(Vec::new()));
        let steps = vec![probe("a", &log), probe("b", &log).after(&["a"]), probe("c", &log).after(&["b"])];
        let mut wf = Workflow::build(&rt, "f", steps).await.unwrap();
        assert_eq!(wf.execute_until_step("zzz").await.unwrap_err(), Error::UnknownStep("zzz".into()));
        wf.execute_until_step("b").await.unwrap();
        assert_eq!(wf.status(), WorkflowStatus::Paused);
        assert_eq!(*log.lock(), vec!["a", "b"]);
        wf.execute().await.unwrap();
        assert_eq!(*log.lock(), vec!["a", "b", "c"]);
        assert_eq!(wf.status(), WorkflowStatus::Committed);
        assert!(matches!(wf.execute().await, Err(Error::InvalidWorkflowState { .. })));
    }

    #[tokio::test(start_paused = true)]
    async fn until_last_step_then_execute_commits_causal() {
        let store = Arc::new(AggregateStore::new());
        let svc = CausalUnitOfWorkService::new(store, Arc::new(CentralizedVersionService::default())).unwrap();
        let rt = WorkflowRuntime::new(Arc::new(svc), ErrorRegistry::default());
        let mut wf = Workflow::build(&rt, "f", vec![noop("x"), noop("y").after(&["x"])]).await.unwrap();
        wf.execute_until_step("y").await.unwrap();
        wf.execute().await.unwrap();
        assert_eq!(wf.status(), WorkflowStatus::Committed);
    }
}
