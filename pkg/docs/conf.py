# Configuration file for the Sphinx documentation builder.
#
# This file only contains a selection of the most common options. For a full
# list see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

import os
import sys
sys.path.insert(0, os.path.abspath('..'))

import cityssl

# -- Project information -----------------------------------------------------

project = 'cityssl'
copyright = "2026, the cityssl developers"
author = 'the cityssl developers'

# The short X.Y version
version = '0.1'
# The full version, including alpha/beta/rc tags
release = '0.1.0'

# -- General configuration ---------------------------------------------------

extensions = [
    'sphinx.ext.autosummary',
    'sphinx.ext.autodoc',
    'sphinx.ext.mathjax',
    'sphinx.ext.viewcode',
    'sphinx.ext.napoleon',
    'sphinx_rtd_theme',
]

autosummary_generate = True
# The docstrings are numpy style.
napoleon_google_docstring = False
napoleon_use_param = False
napoleon_use_ivar = True

# torch and torchvision are heavy; the API pages only need their names.
autodoc_mock_imports = ['torch', 'torchvision']

source_suffix = '.rst'
master_doc = 'index'
language = "en"
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']
pygments_style = 'default'

# -- Options for HTML output -------------------------------------------------

html_theme = 'sphinx_rtd_theme'
htmlhelp_basename = 'cityssldoc'

# -- Options for manual page output ------------------------------------------

man_pages = [
    (master_doc, 'cityssl', 'cityssl Documentation',
     [author], 1)
]
