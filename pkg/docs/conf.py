import os
import sys

sys.path.insert(0, os.path.abspath(".."))

import codealign


project = "codealign"
copyright = "2026, the codealign authors"
author = "the codealign authors"
version = codealign.__version__.rsplit(".", 1)[0]
release = codealign.__version__
templates_path = ["_templates"]
source_suffix = ".rst"
extensions = ["sphinx.ext.autodoc", "sphinx_autodoc_typehints"]
master_doc = "index"
pygments_style = "sphinx"
html_static_path = ["_static"]
