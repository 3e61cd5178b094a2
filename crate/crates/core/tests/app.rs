use std::collections::BTreeSet;

use futures::future::join_all;
use microsim::app::{QuizzesApp, Role, Tournament, ANONYMOUS};
use microsim::messaging::TransportMode;
use microsim::sim::{SimConfig, Simulator};
use microsim::transaction::TransactionModel;
use microsim::Error;

fn sim(model: TransactionModel, mode: TransportMode) -> Simulator {
    let mut cfg = SimConfig::default();
    cfg.transaction.model = model;
    cfg.transport.mode = mode;
    cfg.retry.unbounded = true;
    Simulator::new(cfg).unwrap()
}

fn participants(sim: &Simulator, id: u64) -> BTreeSet<u64> {
    let rec = sim.store.latest(id).unwrap();
    rec.payload::<Tournament>().unwrap().participants.keys().copied().collect()
}

/// Runs one fixed call sequence and returns every tournament payload.
async fn scripted(app: &QuizzesApp) -> Vec<Tournament> {
    let seeded = app.seed_course(3, 10).await.unwrap();
    let [a, b, c] = seeded.students[..] else { unreachable!() };
    app.add_participant(seeded.tournament, seeded.execution, a).await.unwrap();
    app.add_participant(seeded.tournament, seeded.execution, b).await.unwrap();
    app.update_student_name(seeded.execution, a, "renamed").await.unwrap();
    app.process_events().await;
    app.process_events().await;
    app.anonymize_user_in_tournaments(b).await.unwrap();
    app.process_events().await;
    app.process_events().await;
    app.add_participant(seeded.tournament, seeded.execution, c).await.unwrap();
    let second = app.create_tournament(seeded.execution, c, 5, 9, 2, BTreeSet::from([7])).await.unwrap();
    app.add_participant(second, seeded.execution, a).await.unwrap();
    vec![
        app.get_tournament_by_id(seeded.tournament).await.unwrap().tournament,
        app.get_tournament_by_id(second).await.unwrap().tournament,
    ]
}

#[tokio::test(start_paused = true)]
async fn sequential_runs_agree_across_models() {
    let saga = scripted(&sim(TransactionModel::Saga, TransportMode::Local).app).await;
    let causal = scripted(&sim(TransactionModel::Causal, TransportMode::Local).app).await;
    assert_eq!(saga, causal);
    assert_eq!(saga[0].participants.len(), 3);
    assert!(saga[0].participants.values().any(|n| n == "renamed"));
    assert!(saga[0].participants.values().any(|n| n == ANONYMOUS));
}

#[tokio::test(start_paused = true)]
async fn concurrent_adds_keep_every_participant() {
    for model in [TransactionModel::Saga, TransactionModel::Causal] {
        let s = sim(model, TransportMode::Local);
        let seeded = s.app.seed_course(8, 100).await.unwrap();
        let results = join_all(
            seeded.students.iter().map(|&u| s.app.add_participant(seeded.tournament, seeded.execution, u)),
        )
        .await;
        assert!(results.iter().all(Result::is_ok), "{model}: {results:?}");
        assert_eq!(participants(&s, seeded.tournament), seeded.students.iter().copied().collect(), "{model}");
        s.store.audit().unwrap();
    }
}

#[tokio::test(start_paused = true)]
async fn capacity_holds_under_concurrent_causal_adds() {
    let mut cfg = SimConfig::default();
    cfg.transaction.model = TransactionModel::Causal;
    cfg.retry.max_attempts = 20;
    let s = Simulator::new(cfg).unwrap();
    let seeded = s.app.seed_course(8, 4).await.unwrap();
    let results =
        join_all(seeded.students.iter().map(|&u| s.app.add_participant(seeded.tournament, seeded.execution, u))).await;
    let ok = results.iter().filter(|r| r.is_ok()).count();
    assert_eq!(ok, 4);
    assert!(results
        .iter()
        .filter_map(|r| r.as_ref().err())
        .all(|e| e.invariant_name() == Some("TournamentFull")));
    assert_eq!(participants(&s, seeded.tournament).len(), 4);
}

#[tokio::test(start_paused = true)]
async fn non_students_and_unknown_users_are_rejected() {
    for model in [TransactionModel::Saga, TransactionModel::Causal] {
        let s = sim(model, TransportMode::Local);
        let seeded = s.app.seed_course(0, 10).await.unwrap();
        let teacher = s.app.create_user("teacher", Role::Teacher).await.unwrap();
        let err = s.app.enroll_student(seeded.execution, teacher).await.unwrap_err();
        assert!(matches!(err, Error::Domain { ref name, .. } if name == "NotAStudent"), "{err:?}");
        let err = s.app.add_participant(seeded.tournament, seeded.execution, teacher).await.unwrap_err();
        assert!(matches!(err, Error::Domain { ref name, .. } if name == "NotAStudent"), "{err:?}");
        let err = s.app.update_student_name(seeded.execution, teacher, "x").await.unwrap_err();
        assert!(matches!(err, Error::Domain { ref name, .. } if name == "StudentNotEnrolled"), "{err:?}");
        assert!(participants(&s, seeded.tournament).is_empty());
    }
}

#[tokio::test(start_paused = true)]
async fn anonymizing_the_creator_reaches_the_tournament() {
    for mode in TransportMode::ALL {
        let s = sim(TransactionModel::Saga, mode);
        let seeded = s.app.seed_course(1, 10).await.unwrap();
        s.app.add_participant(seeded.tournament, seeded.execution, seeded.students[0]).await.unwrap();
        s.app.anonymize_user_in_tournaments(seeded.creator).await.unwrap();
        s.app.process_events().await;
        s.app.process_events().await;
        let t = s.store.latest(seeded.tournament).unwrap();
        let t = t.payload::<Tournament>().unwrap();
        assert_eq!(t.creator.name, ANONYMOUS, "{mode}");
        assert_eq!(t.participants[&seeded.students[0]], "student-0", "{mode}");
    }
}

#[tokio::test(start_paused = true)]
async fn every_transport_runs_the_same_storm() {
    for mode in TransportMode::ALL {
        for model in [TransactionModel::Saga, TransactionModel::Causal] {
            let s = sim(model, mode);
            let seeded = s.app.seed_course(4, 100).await.unwrap();
            let results = join_all(
                seeded.students.iter().map(|&u| s.app.add_participant(seeded.tournament, seeded.execution, u)),
            )
            .await;
            assert!(results.iter().all(Result::is_ok), "{model} {mode}: {results:?}");
            assert_eq!(participants(&s, seeded.tournament).len(), 4, "{model} {mode}");
        }
    }
}
