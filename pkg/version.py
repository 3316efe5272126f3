"""ganaug version information"""

__version__ = "0.4.0-beta"
__release_date__ = "2026-10-18"
__author__ = "ganaug Development Team"
__status__ = "Beta"
__checkpoint_format__ = 1
