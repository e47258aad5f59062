from concurrent.futures import ThreadPoolExecutor

from app.metrics import MetricsCollector


def test_concurrent_increments_are_not_lost():
    collector = MetricsCollector()

    def bump(_):
        for _ in range(2000):
            collector.increment("rcm_samples")

    with ThreadPoolExecutor(max_workers=8) as pool:
        list(pool.map(bump, range(8)))
    assert collector.get_metrics()["counters"]["rcm_samples"] == 16000


def test_timer_accumulates_across_blocks():
    collector = MetricsCollector()
    for _ in range(3):
        with collector.timer("oze_solve"):
            pass
    timers = collector.get_metrics()["timers_seconds"]
    assert list(timers) == ["oze_solve"]
    assert timers["oze_solve"] >= 0.0


def test_reset_clears_counters_and_timers():
    collector = MetricsCollector()
    collector.increment("validation_pass", 2)
    with collector.timer("expand"):
        pass
    collector.reset()
    snapshot = collector.get_metrics()
    assert snapshot["counters"] == {}
    assert snapshot["timers_seconds"] == {}
