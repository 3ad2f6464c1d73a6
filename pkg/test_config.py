"""
Tests for the configuration module
"""
import logging

from dsgd import config


def test_thread_cap_from_environment(monkeypatch):
    monkeypatch.setenv("DSGD_THREADS", "3")
    assert config.get_thread_cap() == 3


def test_bad_thread_variable_is_reported(monkeypatch):
    monkeypatch.setenv("DSGD_THREADS", "many")
    assert any("DSGD_THREADS" in issue for issue in config.validate_config())


def test_thread_cap_falls_back(monkeypatch):
    monkeypatch.setenv("DSGD_THREADS", "many")
    assert config.get_thread_cap() == 1
    monkeypatch.delenv("DSGD_THREADS")
    assert config.get_thread_cap() >= 1
    assert not any("DSGD_THREADS" in issue for issue in config.validate_config())


def test_setup_logging_installs_one_handler():
    config.setup_logging("DEBUG")
    config.setup_logging("INFO")
    package_logger = logging.getLogger("dsgd")
    assert len(package_logger.handlers) == 1
    assert package_logger.level == logging.INFO


def test_print_config_reports(capsys):
    config.print_config()
    out = capsys.readouterr().out
    assert "DSGD CONFIGURATION" in out
    assert "theta" in out
