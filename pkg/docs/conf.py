#!/usr/bin/env python3
# -*- coding: utf-8 -*-

from subprocess import PIPE, Popen

# -- General configuration ------------------------------------------------

extensions = [
    "myst_parser",
    "sphinx_copybutton",
    "sphinx_markdown_builder",
    "sphinx.ext.autodoc",
]
myst_enable_extensions = ["colon_fence"]

markdown_uri_doc_suffix = ".html"

templates_path = ["_templates"]

source_suffix = [".md", ".rst"]

master_doc = "index"

project = "mfmnet"
copyright = "2026, mfmnet contributors"
author = "mfmnet contributors"

# The short X.Y version and the full release come from git tags
pipe = Popen("git describe --tags --always", stdout=PIPE, shell=True)
git_version = pipe.stdout.read().decode("utf8")

if git_version:
    version = git_version.rsplit("-", 1)[0]
    release = git_version
else:
    version = ""
    release = ""

language = "en"

exclude_patterns = ["_build", "Thumbs.db", ".DS_Store"]

pygments_style = "sphinx"

todo_include_todos = False


# -- Options for HTML output ----------------------------------------------

html_theme = "furo"

html_theme_options = {}
html_title = "mfmnet"

html_static_path = []

htmlhelp_basename = "mfmnet-doc"


# -- Options for LaTeX output ---------------------------------------------

latex_elements = {}

latex_documents = [
    (
        master_doc,
        "mfmnet.tex",
        "mfmnet documentation",
        author,
        "manual",
    )
]


# -- Options for manual page output ---------------------------------------

man_pages = [
    (
        master_doc,
        "mfmnet",
        "mfmnet documentation",
        [author],
        1,
    )
]


# -- Options for Texinfo output -------------------------------------------

texinfo_documents = [
    (
        master_doc,
        "mfmnet",
        "mfmnet documentation",
        author,
        "mfmnet",
        " Train and evaluate Max-Feature-Map face representation networks ",
        "Miscellaneous",
    )
]
