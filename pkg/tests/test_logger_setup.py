from logger_setup import attach_run_log, detach_run_log, get_logger


def _drop(logger):
    for h in list(logger.handlers):
        logger.removeHandler(h)
        h.close()


class TestGetLogger:
    def test_lines_go_to_stderr_not_stdout(self, capsys):
        log = get_logger("glyphdiff.stream_target")
        try:
            log.info("hello from the pipeline")
            captured = capsys.readouterr()
            assert "hello from the pipeline" in captured.err
            assert captured.out == ""
        finally:
            _drop(log)

    def test_handlers_are_reused(self):
        a = get_logger("glyphdiff.reuse")
        try:
            assert get_logger("glyphdiff.reuse") is a
            assert len(a.handlers) == 2
            assert not a.propagate
        finally:
            _drop(a)

    def test_run_log_attach_is_idempotent(self, tmp_path):
        log = get_logger("glyphdiff.run_log")
        try:
            h1 = attach_run_log(log, tmp_path)
            assert attach_run_log(log, tmp_path) is h1
            log.info("into the run dir")
            detach_run_log(log, h1)
            assert "into the run dir" in (tmp_path / "run.log").read_text(encoding="utf-8")
            assert h1 not in log.handlers
        finally:
            _drop(log)
