"""
conftest.py
---

  Puts the repository root on the import path so that `import src...` resolves, and points the workspace at a
  temporary directory so tests never write into data/.

"""

import pytest

@pytest.fixture(autouse=True)
def _workspace(tmp_path, monkeypatch):
  import src.utils.utility as _util

  monkeypatch.setenv("JSCE_WS_PATH", str(tmp_path))
  monkeypatch.setattr(_util, "_ws_dir", None)
  yield tmp_path
