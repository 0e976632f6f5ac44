import logging

import pytest

from faults.api import FaultPlugin
from plugin_manager import PluginManager


def test_discovers_every_bundled_fault(plugins):
    assert plugins.kinds() == ["byzantine_sort", "crash_on_size", "hang", "leak", "overload_hang",
                               "reject_malformed_off"]
    assert all(isinstance(p, FaultPlugin) for p in plugins.faults.values())
    assert plugins.get("meteor") is None


def write_plugin(root, name, body, package=True):
    folder = root / name
    folder.mkdir()
    if package:
        (folder / "__init__.py").write_text("")
    (folder / "plugin.py").write_text(body)


def test_skips_broken_and_foreign_plugins(tmp_path, caplog):
    write_plugin(tmp_path, "not_a_package", "def register():\n    return None\n", package=False)
    write_plugin(tmp_path, "no_register", "X = 1\n")
    write_plugin(tmp_path, "wrong_type", "def register():\n    return object()\n")
    write_plugin(tmp_path, "raises", "raise RuntimeError('boom')\n")
    write_plugin(tmp_path, "good", (
        "from faults.api import FaultPlugin\n"
        "class Good(FaultPlugin):\n"
        "    name = 'good'\n"
        "    display_name = 'Good'\n"
        "def register():\n"
        "    return Good()\n"
    ))
    manager = PluginManager(tmp_path)
    with caplog.at_level(logging.WARNING):
        manager.discover_plugins()
    assert manager.kinds() == ["good"]
    assert "not a package" in caplog.text
    assert "not a FaultPlugin" in caplog.text


def test_missing_folder_is_logged(tmp_path, caplog):
    manager = PluginManager(tmp_path / "absent")
    manager.discover_plugins()
    assert manager.kinds() == []
    assert "Plugin directory not found" in caplog.text


@pytest.mark.parametrize("params", [{"delay_ms": -5}, {"delay_ms": True}, {"delay_ms": "5"}, {"other": 1}])
def test_validate_rejects_bad_params(plugins, params):
    with pytest.raises(ValueError):
        plugins.get("hang").validate(params)
