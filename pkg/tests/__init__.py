"""Tests for WhatsApp Wrapped."""



